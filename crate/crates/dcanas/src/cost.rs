//! Resource cost model.
//!
//! Two faces of one formula family: `search_cost` is the differentiable
//! softmax-weighted cost of the supernet's architecture parameters, and
//! `derived_cost` is the exact integer cost of a discrete architecture's
//! stacked evaluation network (stem, preprocessing, cell ops, classifier).
//! FLOPs are multiply-accumulate counts of convolutions and the classifier;
//! pooling/activation/normalization arithmetic is not counted.

use std::cell::RefCell;
use std::collections::BTreeMap;

use crate::autodiff::gradcheck::{GradCheck, GradCheckReport};
use crate::autodiff::{Scalar, Tape, Tensor};
use crate::error::{Error, Result};
use crate::genotype::Genotype;
use crate::space::alpha::{AlphaSnapshot, AlphaTable};
use crate::space::cell::{edge_stride, edges, CellKind, INPUT_NODES};
use crate::space::opset::{bottleneck_width, OpKind, OpSet};
use crate::space::supernet::{cell_layout, CellSpec, SupernetConfig};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum CostMetric {
    /// Learnable parameter count.
    Params,
    /// Multiply-accumulate count per example.
    Flops,
}

impl CostMetric {
    pub fn name(&self) -> &'static str {
        match self {
            CostMetric::Params => "params",
            CostMetric::Flops => "flops",
        }
    }

    pub fn from_name(s: &str) -> Option<CostMetric> {
        match s {
            "params" => Some(CostMetric::Params),
            "flops" => Some(CostMetric::Flops),
            _ => None,
        }
    }
}

/// Channel/spatial situation an operation instance lives in.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug)]
pub struct OpContext {
    pub channels: usize,
    /// Spatial size the op consumes.
    pub in_spatial: (usize, usize),
    pub stride: usize,
    /// Channel-bottleneck ratio, when the op is wrapped.
    pub bottleneck: Option<usize>,
}

pub fn conv_params(k: usize, c_in: usize, c_out: usize) -> u64 {
    (k * k * c_in * c_out) as u64
}

pub fn conv_flops(k: usize, c_in: usize, c_out: usize, out_spatial: (usize, usize)) -> u64 {
    conv_params(k, c_in, c_out) * (out_spatial.0 * out_spatial.1) as u64
}

fn bn_params(channels: usize) -> u64 {
    // Affine scale and shift, as instantiated in the evaluation network.
    (2 * channels) as u64
}

fn out_spatial(in_spatial: (usize, usize), stride: usize) -> (usize, usize) {
    (in_spatial.0 / stride, in_spatial.1 / stride)
}

fn sep_conv_cost(k: usize, c: usize, ctx: &OpContext, metric: CostMetric) -> u64 {
    match metric {
        CostMetric::Params => 2 * ((c * k * k) as u64 + conv_params(1, c, c) + bn_params(c)),
        CostMetric::Flops => {
            let sp = out_spatial(ctx.in_spatial, ctx.stride);
            let area = (sp.0 * sp.1) as u64;
            // Both depthwise+pointwise blocks run at the strided spatial size.
            2 * ((k * k * c) as u64 + (c * c) as u64) * area
        }
    }
}

fn dil_conv_cost(k: usize, c: usize, ctx: &OpContext, metric: CostMetric) -> u64 {
    match metric {
        CostMetric::Params => (c * k * k) as u64 + conv_params(1, c, c) + bn_params(c),
        CostMetric::Flops => {
            let sp = out_spatial(ctx.in_spatial, ctx.stride);
            ((k * k * c) as u64 + (c * c) as u64) * (sp.0 * sp.1) as u64
        }
    }
}

fn factorized_reduce_cost(c_in: usize, c_out: usize, in_spatial: (usize, usize), metric: CostMetric) -> u64 {
    match metric {
        CostMetric::Params => (c_in * c_out) as u64 + bn_params(c_out),
        CostMetric::Flops => {
            let sp = out_spatial(in_spatial, 2);
            (c_in * c_out * sp.0 * sp.1) as u64
        }
    }
}

/// Exact cost of one candidate operation instance.
pub fn op_cost(kind: OpKind, ctx: &OpContext, metric: CostMetric) -> u64 {
    if let Some(r) = ctx.bottleneck {
        if r > 1 && kind.is_bottleneck_eligible() {
            let inner_c = bottleneck_width(ctx.channels, r);
            let inner_ctx = OpContext { channels: inner_c, bottleneck: None, ..*ctx };
            let inner = op_cost(kind, &inner_ctx, metric);
            return match metric {
                CostMetric::Params => {
                    conv_params(1, ctx.channels, inner_c) + inner + conv_params(1, inner_c, ctx.channels)
                }
                CostMetric::Flops => {
                    let reduce = conv_flops(1, ctx.channels, inner_c, ctx.in_spatial);
                    let expand =
                        conv_flops(1, inner_c, ctx.channels, out_spatial(ctx.in_spatial, ctx.stride));
                    reduce + inner + expand
                }
            };
        }
    }
    let c = ctx.channels;
    match kind {
        OpKind::Zero | OpKind::MaxPool3x3 | OpKind::AvgPool3x3 => 0,
        OpKind::SkipConnect => {
            if ctx.stride == 1 {
                0
            } else {
                factorized_reduce_cost(c, c, ctx.in_spatial, metric)
            }
        }
        OpKind::SepConv3x3 => sep_conv_cost(3, c, ctx, metric),
        OpKind::SepConv5x5 => sep_conv_cost(5, c, ctx, metric),
        OpKind::DilConv3x3 => dil_conv_cost(3, c, ctx, metric),
        OpKind::DilConv5x5 => dil_conv_cost(5, c, ctx, metric),
    }
}

/// Memoized `(op, context) → b(o)` lookups.
pub struct CostTable {
    pub metric: CostMetric,
    cache: RefCell<BTreeMap<(&'static str, OpContext), u64>>,
}

impl CostTable {
    pub fn new(metric: CostMetric) -> Self {
        CostTable { metric, cache: RefCell::new(BTreeMap::new()) }
    }

    pub fn get(&self, kind: OpKind, ctx: &OpContext) -> u64 {
        let key = (kind.name(), *ctx);
        if let Some(v) = self.cache.borrow().get(&key) {
            return *v;
        }
        let v = op_cost(kind, ctx, self.metric);
        self.cache.borrow_mut().insert(key, v);
        v
    }
}

/// Per-edge cost vectors `b(o)` for one cell: rows follow α row order.
pub fn cell_edge_costs(
    kind: CellKind,
    nodes: usize,
    op_set: &OpSet,
    channels: usize,
    cell_in_spatial: (usize, usize),
    bottleneck: Option<usize>,
    metric: CostMetric,
) -> Vec<Vec<f64>> {
    let reduced = out_spatial(cell_in_spatial, if kind == CellKind::Reduction { 2 } else { 1 });
    edges(nodes)
        .into_iter()
        .map(|(src, _dst)| {
            let stride = edge_stride(kind, src);
            // Stride-1 edges in a reduction cell consume already-halved maps.
            let in_spatial = if stride == 2 { cell_in_spatial } else { reduced };
            let ctx = OpContext { channels, in_spatial, stride, bottleneck };
            op_set
                .kinds()
                .iter()
                .map(|k| op_cost(*k, &ctx, metric) as f64)
                .collect()
        })
        .collect()
}

/// Differentiable search-time cost of the supernet under its α tables.
pub struct SearchCost<E: Scalar> {
    pub value: Tensor<E>,
    pub metric: CostMetric,
}

impl<E: Scalar> SearchCost<E> {
    pub fn item(&self) -> f64 {
        self.value.item().as_f64()
    }
}

/// Softmax-expected cost of one edge: `softmax(α_row) · b`.
pub fn edge_mixed_cost<E: Scalar>(
    tape: &Tape<E>,
    alpha_row: &Tensor<E>,
    costs: &[f64],
) -> Result<Tensor<E>> {
    let b = Tensor::from_vec(
        &[costs.len()],
        costs.iter().map(|&c| E::from_f64(c)).collect(),
    )?;
    let sm = tape.softmax(alpha_row);
    let weighted = tape.mul(&sm, &b)?;
    Ok(tape.sum_all(&weighted))
}

/// `k_s(α)`: sum over cells and edges of the softmax-expected op cost, each
/// cell priced in its own channel/spatial context. When every cell shares one
/// context this collapses to `c_n · Σ_edges softmax(α)·b`.
pub fn search_cost<E: Scalar>(
    tape: &Tape<E>,
    alpha: &AlphaTable<E>,
    specs: &[CellSpec],
    op_set: &OpSet,
    bottleneck: Option<usize>,
    metric: CostMetric,
) -> Result<SearchCost<E>> {
    let mut total: Option<Tensor<E>> = None;
    for spec in specs {
        let rows = cell_edge_costs(
            spec.kind,
            alpha.nodes,
            op_set,
            spec.channels,
            spec.in_spatial,
            bottleneck,
            metric,
        );
        let table = alpha.for_kind(spec.kind);
        for (e, costs) in rows.iter().enumerate() {
            let row = tape.row(table, e)?;
            let c = edge_mixed_cost(tape, &row, costs)?;
            total = Some(match total {
                Some(t) => tape.add(&t, &c)?,
                None => c,
            });
        }
    }
    let value = total.ok_or_else(|| Error::config("search cost over an empty cell stack"))?;
    Ok(SearchCost { value, metric })
}

/// Convenience: `k_s` for a supernet configuration's own layout.
pub fn supernet_search_cost<E: Scalar>(
    tape: &Tape<E>,
    alpha: &AlphaTable<E>,
    cfg: &SupernetConfig,
    op_set: &OpSet,
    metric: CostMetric,
) -> Result<SearchCost<E>> {
    let specs = cell_layout(cfg)?;
    let bottleneck = cfg.channel_bottleneck.then_some(cfg.bottleneck_ratio);
    search_cost(tape, alpha, &specs, op_set, bottleneck, metric)
}

/// Evaluation-phase network shape.
#[derive(Debug, Clone)]
pub struct TargetNetConfig {
    pub layers: usize,
    pub channels: usize,
    pub input_channels: usize,
    pub input_hw: (usize, usize),
    pub classes: usize,
}

impl TargetNetConfig {
    pub fn desk(classes: usize) -> Self {
        TargetNetConfig {
            layers: 4,
            channels: 8,
            input_channels: 1,
            input_hw: (16, 16),
            classes,
        }
    }

    pub fn reduction_positions(&self) -> Vec<usize> {
        let mut v = vec![self.layers / 3, 2 * self.layers / 3];
        v.dedup();
        v.retain(|&p| p < self.layers);
        v
    }
}

/// Exact discrete cost of the stacked evaluation network for a genotype,
/// including stem, per-cell preprocessing and the classifier head.
pub fn derived_cost(genotype: &Genotype, cfg: &TargetNetConfig, metric: CostMetric) -> Result<u64> {
    genotype.validate()?;
    if cfg.layers == 0 {
        return Err(Error::config("target network needs at least one cell"));
    }
    let mult = genotype.nodes - INPUT_NODES;
    let reductions = cfg.reduction_positions();
    let mut total: u64 = 0;

    // Stem: 3x3 conv + affine BN.
    total += match metric {
        CostMetric::Params => {
            conv_params(3, cfg.input_channels, cfg.channels) + bn_params(cfg.channels)
        }
        CostMetric::Flops => conv_flops(3, cfg.input_channels, cfg.channels, cfg.input_hw),
    };

    let mut channels = cfg.channels;
    let mut spatial = cfg.input_hw;
    let mut c_pp = cfg.channels;
    let mut c_p = cfg.channels;
    let mut sp_pp = cfg.input_hw;
    for layer in 0..cfg.layers {
        let kind = if reductions.contains(&layer) {
            CellKind::Reduction
        } else {
            CellKind::Normal
        };
        if kind == CellKind::Reduction {
            channels *= 2;
        }
        let in_sp = spatial;
        let cell_out_sp = out_spatial(in_sp, if kind == CellKind::Reduction { 2 } else { 1 });

        // Preprocessing of the two input states.
        total += if sp_pp != in_sp {
            factorized_reduce_cost(c_pp, channels, sp_pp, metric)
        } else {
            match metric {
                CostMetric::Params => conv_params(1, c_pp, channels) + bn_params(channels),
                CostMetric::Flops => conv_flops(1, c_pp, channels, in_sp),
            }
        };
        total += match metric {
            CostMetric::Params => conv_params(1, c_p, channels) + bn_params(channels),
            CostMetric::Flops => conv_flops(1, c_p, channels, in_sp),
        };

        // Selected edges of this cell.
        let arch = match kind {
            CellKind::Normal => &genotype.normal,
            CellKind::Reduction => &genotype.reduction,
        };
        let reduced = out_spatial(in_sp, if kind == CellKind::Reduction { 2 } else { 1 });
        for edge in arch {
            let stride = edge_stride(kind, edge.source);
            let op = OpKind::from_name(&edge.op).ok_or_else(|| Error::UnknownOp(edge.op.clone()))?;
            let edge_in = if stride == 2 { in_sp } else { reduced };
            let ctx = OpContext { channels, in_spatial: edge_in, stride, bottleneck: None };
            total += op_cost(op, &ctx, metric);
        }

        c_pp = c_p;
        c_p = mult * channels;
        sp_pp = in_sp;
        spatial = cell_out_sp;
    }

    // Classifier: global pool (free) then linear with bias.
    total += match metric {
        CostMetric::Params => (c_p * cfg.classes + cfg.classes) as u64,
        CostMetric::Flops => (c_p * cfg.classes) as u64,
    };
    Ok(total)
}

/// Finite-difference check of `∂k_s/∂α` for a given α and cell stack.
pub fn grad_check_search_cost(
    alpha: &AlphaSnapshot,
    specs: &[CellSpec],
    op_set: &OpSet,
    bottleneck: Option<usize>,
    metric: CostMetric,
) -> Result<GradCheckReport> {
    let rows = alpha.normal.len();
    let flat = |rows: &[Vec<f64>]| -> Vec<f64> { rows.iter().flatten().copied().collect() };
    let table = AlphaTable::<f64> {
        normal: Tensor::from_vec(&[rows, alpha.num_ops], flat(&alpha.normal))?.requires_grad_(true),
        reduction: Tensor::from_vec(&[alpha.reduction.len(), alpha.num_ops], flat(&alpha.reduction))?
            .requires_grad_(true),
        nodes: alpha.nodes,
        num_ops: alpha.num_ops,
    };
    let tape = Tape::new();
    let ks = search_cost(&tape, &table, specs, op_set, bottleneck, metric)?;
    tape.backward(&ks.value)?;
    let params = table.params();
    let grads: Vec<Vec<f64>> = params.iter().map(|(_, p)| p.grad_or_zeros()).collect();
    for (_, p) in &params {
        p.zero_grad();
    }
    let check = GradCheck { eps: 1e-3, ..GradCheck::default() };
    Ok(check.run(&params, &grads, || {
        let tape = Tape::inference();
        search_cost(&tape, &table, specs, op_set, bottleneck, metric)
            .expect("layout already validated")
            .item()
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::supernet::SupernetConfig;
    use proptest::prelude::*;
    use rand::Rng as _;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ctx(channels: usize, spatial: usize, stride: usize) -> OpContext {
        OpContext {
            channels,
            in_spatial: (spatial, spatial),
            stride,
            bottleneck: None,
        }
    }

    #[test]
    fn zero_and_pool_ops_cost_nothing() {
        for metric in [CostMetric::Params, CostMetric::Flops] {
            assert_eq!(op_cost(OpKind::Zero, &ctx(16, 8, 1), metric), 0);
            assert_eq!(op_cost(OpKind::MaxPool3x3, &ctx(16, 8, 2), metric), 0);
            assert_eq!(op_cost(OpKind::AvgPool3x3, &ctx(16, 8, 1), metric), 0);
        }
        assert_eq!(op_cost(OpKind::SkipConnect, &ctx(16, 8, 1), CostMetric::Params), 0);
    }

    #[test]
    fn plain_conv_counts() {
        // 3×3, 8→8, bias off.
        assert_eq!(conv_params(3, 8, 8), 576);
        // Same conv applied over a 16×16 map: one MAC per weight per output px.
        assert_eq!(conv_flops(3, 8, 8, (16, 16)), 576 * 256);
    }

    /// Count MACs by literally walking the convolution loops at a tiny size.
    #[test]
    fn conv_flops_matches_enumeration_oracle() {
        let (k, c_in, c_out, h, w) = (3usize, 2usize, 4usize, 5usize, 6usize);
        let mut macs = 0u64;
        for _co in 0..c_out {
            for _oy in 0..h {
                for _ox in 0..w {
                    for _ci in 0..c_in {
                        for _ky in 0..k {
                            for _kx in 0..k {
                                macs += 1; // one multiply-accumulate
                            }
                        }
                    }
                }
            }
        }
        assert_eq!(conv_flops(k, c_in, c_out, (h, w)), macs);
    }

    #[test]
    fn sep_conv_params_match_layer_enumeration() {
        // sep-conv-3x3 at C=16 with bottleneck r=4: reduce 1x1, inner sep conv
        // at 4 channels, expand 1x1. Enumerate the layers by hand.
        let c = 16usize;
        let inner = 4usize;
        let inner_params = 2 * (inner * 9 + inner * inner + 2 * inner) as u64;
        let expected = (c * inner) as u64 + inner_params + (inner * c) as u64;
        let got = op_cost(
            OpKind::SepConv3x3,
            &OpContext { channels: c, in_spatial: (8, 8), stride: 1, bottleneck: Some(4) },
            CostMetric::Params,
        );
        assert_eq!(got, expected);
        // r=1 leaves the op unwrapped.
        let plain = op_cost(
            OpKind::SepConv3x3,
            &OpContext { channels: c, in_spatial: (8, 8), stride: 1, bottleneck: Some(1) },
            CostMetric::Params,
        );
        assert_eq!(plain, 2 * (16 * 9 + 256 + 32) as u64);
    }

    #[test]
    fn cost_table_caches_and_agrees() {
        let table = CostTable::new(CostMetric::Params);
        let c = ctx(8, 16, 1);
        assert_eq!(table.get(OpKind::DilConv5x5, &c), op_cost(OpKind::DilConv5x5, &c, CostMetric::Params));
        assert_eq!(table.get(OpKind::Zero, &c), 0);
    }

    fn uniform_specs(n: usize, channels: usize, spatial: usize) -> Vec<CellSpec> {
        (0..n)
            .map(|index| CellSpec {
                index,
                kind: CellKind::Normal,
                channels,
                mixed: true,
                in_spatial: (spatial, spatial),
                out_spatial: (spatial, spatial),
            })
            .collect()
    }

    #[test]
    fn edge_cost_uniform_alpha_is_the_mean() {
        let tape = Tape::<f64>::new();
        let row = Tensor::zeros(&[3]);
        let c = edge_mixed_cost(&tape, &row, &[10.0, 20.0, 30.0]).unwrap();
        assert!((c.item() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn single_op_three_cells_is_three_b() {
        // |O|=1 makes softmax degenerate to 1; three identical cells give 3·b.
        let tape = Tape::<f64>::new();
        let mut total = 0.0;
        for _ in 0..3 {
            let row = Tensor::zeros(&[1]);
            total += edge_mixed_cost(&tape, &row, &[7.0]).unwrap().item();
        }
        assert!((total - 21.0).abs() < 1e-9);
    }

    #[test]
    fn closed_form_two_op_softmax() {
        // α = (ln 2, 0) ⇒ weights (2/3, 1/3); b = (100, 50) ⇒ 250/3.
        let tape = Tape::<f64>::new();
        let row = Tensor::from_vec(&[2], vec![2.0f64.ln(), 0.0]).unwrap();
        let c = edge_mixed_cost(&tape, &row, &[100.0, 50.0]).unwrap();
        assert!((c.item() - 250.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn uniform_context_collapses_to_cn_times_single_cell() {
        let op_set = OpSet::default_darts();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let alpha = AlphaTable::<f64>::init(4, op_set.len(), &mut rng).unwrap();
        let one = search_cost(
            &Tape::inference(),
            &alpha,
            &uniform_specs(1, 8, 16),
            &op_set,
            None,
            CostMetric::Params,
        )
        .unwrap()
        .item();
        let five = search_cost(
            &Tape::inference(),
            &alpha,
            &uniform_specs(5, 8, 16),
            &op_set,
            None,
            CostMetric::Params,
        )
        .unwrap()
        .item();
        assert!((five - 5.0 * one).abs() < 1e-6 * five.abs());
    }

    #[test]
    fn gradient_check_small_and_full_cell() {
        let op_set = OpSet::default_darts();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // 14-edge cell (N=6), 8 ops, mixed contexts from a real layout.
        let cfg = SupernetConfig { cells: 4, channels: 8, nodes: 6, ..Default::default() };
        let specs = cell_layout(&cfg).unwrap();
        let alpha_t = AlphaTable::<f64>::init(6, op_set.len(), &mut rng).unwrap();
        {
            let mut d = alpha_t.normal.data_mut();
            for v in d.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
        let report = grad_check_search_cost(
            &alpha_t.snapshot(),
            &specs,
            &op_set,
            Some(4),
            CostMetric::Params,
        )
        .unwrap();
        assert!(report.passes(1e-4), "{:?}", report);
    }

    #[test]
    fn shift_invariance_of_ks() {
        let op_set = OpSet::default_darts();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let alpha = AlphaTable::<f64>::init(4, op_set.len(), &mut rng).unwrap();
        let specs = uniform_specs(3, 8, 16);
        let before = search_cost(&Tape::inference(), &alpha, &specs, &op_set, None, CostMetric::Params)
            .unwrap()
            .item();
        for t in [&alpha.normal, &alpha.reduction] {
            let mut d = t.data_mut();
            for v in d.iter_mut() {
                *v += 5.0;
            }
        }
        let after = search_cost(&Tape::inference(), &alpha, &specs, &op_set, None, CostMetric::Params)
            .unwrap()
            .item();
        assert!((before - after).abs() <= 1e-6 * before.abs().max(1.0));
    }

    #[test]
    fn derived_cost_monotone_in_channels() {
        let op_set = OpSet::default_darts();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let alpha = AlphaTable::<f64>::init(4, op_set.len(), &mut rng).unwrap();
        let g = crate::genotype::derive_genotype(&alpha.snapshot(), &op_set).unwrap();
        let base = TargetNetConfig::desk(2);
        let small = derived_cost(&g, &base, CostMetric::Params).unwrap();
        let big = derived_cost(
            &g,
            &TargetNetConfig { channels: base.channels * 2, ..base },
            CostMetric::Params,
        )
        .unwrap();
        assert!(big > small);
    }

    #[test]
    fn all_skip_genotype_has_zero_stride1_edge_cost() {
        use crate::genotype::GenotypeEdge;
        let mk = |op: &str| {
            vec![
                GenotypeEdge { target: 2, source: 0, op: op.into() },
                GenotypeEdge { target: 2, source: 1, op: op.into() },
                GenotypeEdge { target: 3, source: 0, op: op.into() },
                GenotypeEdge { target: 3, source: 1, op: op.into() },
            ]
        };
        let g = Genotype { nodes: 4, normal: mk("skip_connect"), reduction: mk("skip_connect") };
        // Normal cells contribute zero edge-op params; what remains is the
        // fixed overhead (stem, preprocessing, classifier and the stride-2
        // factorized reductions inside reduction cells).
        let with_skip = derived_cost(&g, &TargetNetConfig::desk(2), CostMetric::Params).unwrap();
        let g_pool = Genotype { nodes: 4, normal: mk("avg_pool_3x3"), reduction: mk("skip_connect") };
        let with_pool = derived_cost(&g_pool, &TargetNetConfig::desk(2), CostMetric::Params).unwrap();
        assert_eq!(with_skip, with_pool, "stride-1 skip and pool edges both cost zero params");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        /// k_s sits strictly inside the per-edge min/max envelope for
        /// non-degenerate α, and is shift-invariant.
        #[test]
        fn ks_bounds_and_shift_invariance(seed in 0u64..10_000) {
            let op_set = OpSet::default_darts();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let alpha = AlphaTable::<f64>::init(4, op_set.len(), &mut rng).unwrap();
            {
                let mut d = alpha.normal.data_mut();
                for v in d.iter_mut() { *v = rng.gen_range(-3.0..3.0); }
            }
            {
                let mut d = alpha.reduction.data_mut();
                for v in d.iter_mut() { *v = rng.gen_range(-3.0..3.0); }
            }
            let specs = uniform_specs(2, 8, 16);
            let tape = Tape::inference();
            let ks = search_cost(&tape, &alpha, &specs, &op_set, None, CostMetric::Params)
                .unwrap()
                .item();
            let rows = cell_edge_costs(CellKind::Normal, 4, &op_set, 8, (16, 16), None, CostMetric::Params);
            let lo: f64 = rows.iter().map(|r| r.iter().cloned().fold(f64::INFINITY, f64::min)).sum::<f64>() * 2.0;
            let hi: f64 = rows.iter().map(|r| r.iter().cloned().fold(f64::NEG_INFINITY, f64::max)).sum::<f64>() * 2.0;
            prop_assert!(ks > lo && ks < hi, "ks={ks} not in ({lo}, {hi})");

            let shift = rng.gen_range(-4.0..4.0);
            for t in [&alpha.normal, &alpha.reduction] {
                let mut d = t.data_mut();
                for v in d.iter_mut() { *v += shift; }
            }
            let shifted = search_cost(&tape, &alpha, &specs, &op_set, None, CostMetric::Params)
                .unwrap()
                .item();
            prop_assert!((ks - shifted).abs() <= 1e-6 * ks.abs().max(1.0));
        }

        /// Conv FLOPs scale linearly with spatial area.
        #[test]
        fn flops_linear_in_area(c in 1usize..32, k in prop::sample::select(vec![3usize, 5]), s in 2usize..20) {
            let base = op_cost(OpKind::SepConv3x3, &OpContext {
                channels: c, in_spatial: (s, s), stride: 1, bottleneck: None,
            }, CostMetric::Flops);
            let double = op_cost(OpKind::SepConv3x3, &OpContext {
                channels: c, in_spatial: (s, 2 * s), stride: 1, bottleneck: None,
            }, CostMetric::Flops);
            prop_assert_eq!(double, 2 * base);
            let _ = k;
        }
    }
}
