//! The search-phase supernet: a stack of cells whose edges hold softmax-mixed
//! candidate operations.
//!
//! Three search-time accelerations are toggleable: weight sharing (one weight
//! object per (source node, op) within a cell), the channel bottleneck (1x1
//! reduce/expand around conv ops) and derived cells (only the first normal
//! and first reduction cell keep mixed edges; the rest are re-derived each
//! iteration from the current top-weighted ops).

use std::cell::RefCell;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Scalar, Tape, Tensor};
use crate::error::{Error, Result};
use crate::genotype::{derive_cell_arch, CellArch};

use super::alpha::AlphaTable;
use super::cell::{edge_index, edge_stride, edges, num_edges, CellKind, INPUT_NODES};
use super::layers::{BatchNorm, Conv2d, FactorizedReduce, Linear, ReluConvBn};
use super::opset::{CandidateOp, OpSet};

#[derive(Debug, Clone)]
pub struct SupernetConfig {
    /// Total stacked cells c_n.
    pub cells: usize,
    /// Initial channel count.
    pub channels: usize,
    /// Nodes per cell (including the 2 input nodes).
    pub nodes: usize,
    pub input_channels: usize,
    pub input_hw: (usize, usize),
    pub classes: usize,
    /// Channel-bottleneck ratio r.
    pub bottleneck_ratio: usize,
    pub weight_sharing: bool,
    pub channel_bottleneck: bool,
    pub derived_cells: bool,
}

impl Default for SupernetConfig {
    fn default() -> Self {
        SupernetConfig {
            cells: 8,
            channels: 8,
            nodes: 6,
            input_channels: 1,
            input_hw: (16, 16),
            classes: 2,
            bottleneck_ratio: 4,
            weight_sharing: true,
            channel_bottleneck: true,
            derived_cells: true,
        }
    }
}

impl SupernetConfig {
    /// The 4-cell, 8-channel, 4-node configuration used by desk-scale runs.
    pub fn desk(classes: usize) -> Self {
        SupernetConfig {
            cells: 4,
            channels: 8,
            nodes: 4,
            classes,
            ..SupernetConfig::default()
        }
    }

    /// Indices of reduction cells: ⌊c_n/3⌋ and ⌊2c_n/3⌋.
    pub fn reduction_positions(&self) -> Vec<usize> {
        let mut v = vec![self.cells / 3, 2 * self.cells / 3];
        v.dedup();
        v.retain(|&p| p < self.cells);
        v
    }
}

#[derive(Debug, Clone)]
pub struct CellSpec {
    pub index: usize,
    pub kind: CellKind,
    /// Operating channel count of this cell's ops.
    pub channels: usize,
    /// Whether the cell holds mixed (α-weighted) edges.
    pub mixed: bool,
    /// Spatial size of preprocessed inputs / of the cell output.
    pub in_spatial: (usize, usize),
    pub out_spatial: (usize, usize),
}

/// Channel/spatial walk over the stack; also consumed by the cost model.
pub fn cell_layout(cfg: &SupernetConfig) -> Result<Vec<CellSpec>> {
    super::cell::validate_nodes(cfg.nodes)?;
    if cfg.cells == 0 {
        return Err(Error::config("supernet needs at least one cell"));
    }
    if cfg.derived_cells && cfg.cells < 2 {
        return Err(Error::config(
            "derived cells require at least 2 cells (one per trainable kind)",
        ));
    }
    let reductions = cfg.reduction_positions();
    let mut specs = Vec::with_capacity(cfg.cells);
    let mut channels = cfg.channels;
    let mut spatial = cfg.input_hw;
    let mut seen = (false, false); // (normal, reduction) trainable placed
    for index in 0..cfg.cells {
        let kind = if reductions.contains(&index) {
            CellKind::Reduction
        } else {
            CellKind::Normal
        };
        if kind == CellKind::Reduction {
            channels *= 2;
            if spatial.0 % 2 != 0 || spatial.1 % 2 != 0 {
                return Err(Error::config(format!(
                    "cell {index}: cannot halve odd spatial size {spatial:?}"
                )));
            }
        }
        let out_spatial = if kind == CellKind::Reduction {
            (spatial.0 / 2, spatial.1 / 2)
        } else {
            spatial
        };
        let mixed = if cfg.derived_cells {
            match kind {
                CellKind::Normal if !seen.0 => {
                    seen.0 = true;
                    true
                }
                CellKind::Reduction if !seen.1 => {
                    seen.1 = true;
                    true
                }
                _ => false,
            }
        } else {
            true
        };
        specs.push(CellSpec {
            index,
            kind,
            channels,
            mixed,
            in_spatial: spatial,
            out_spatial,
        });
        spatial = out_spatial;
    }
    Ok(specs)
}

/// Candidate-op weights of one cell. With sharing, edges leaving the same
/// source node reference one op instance; without it, every edge owns one.
pub struct WeightStore<E: Scalar> {
    shared: bool,
    nodes: usize,
    num_ops: usize,
    ops: Vec<CandidateOp<E>>,
}

impl<E: Scalar> WeightStore<E> {
    fn build(
        rng: &mut ChaCha8Rng,
        kind: CellKind,
        nodes: usize,
        op_set: &OpSet,
        channels: usize,
        bottleneck: Option<usize>,
        shared: bool,
    ) -> Result<Self> {
        let mut ops = Vec::new();
        if shared {
            for src in 0..nodes - 1 {
                let stride = edge_stride(kind, src);
                for k in op_set.kinds() {
                    ops.push(CandidateOp::build(rng, *k, channels, stride, bottleneck, false)?);
                }
            }
        } else {
            for (src, _dst) in edges(nodes) {
                let stride = edge_stride(kind, src);
                for k in op_set.kinds() {
                    ops.push(CandidateOp::build(rng, *k, channels, stride, bottleneck, false)?);
                }
            }
        }
        Ok(WeightStore { shared, nodes, num_ops: op_set.len(), ops })
    }

    pub fn is_shared(&self) -> bool {
        self.shared
    }

    pub fn op(&self, source: usize, target: usize, op_idx: usize) -> &CandidateOp<E> {
        let slot = if self.shared {
            source * self.num_ops + op_idx
        } else {
            edge_index(source, target) * self.num_ops + op_idx
        };
        &self.ops[slot]
    }

    /// Number of candidate-op instances that own trainable weights.
    pub fn weighted_object_count(&self) -> usize {
        self.ops.iter().filter(|o| o.has_weights()).count()
    }

    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        for (slot, op) in self.ops.iter().enumerate() {
            op.collect_params(&format!("{prefix}.op{slot}"), out);
        }
    }

    /// Cache slot for a (source, op) pair when sharing is on.
    fn cache_slot(&self, source: usize, op_idx: usize) -> usize {
        source * self.num_ops + op_idx
    }

    fn cache_len(&self) -> usize {
        (self.nodes - 1) * self.num_ops
    }
}

enum Preprocess<E: Scalar> {
    Std(ReluConvBn<E>),
    Reduce(FactorizedReduce<E>),
}

impl<E: Scalar> Preprocess<E> {
    fn forward(&self, tape: &Tape<E>, x: &Tensor<E>, training: bool) -> Result<Tensor<E>> {
        match self {
            Preprocess::Std(p) => p.forward(tape, x, training),
            Preprocess::Reduce(p) => p.forward(tape, x, training),
        }
    }

    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        match self {
            Preprocess::Std(p) => p.collect_params(prefix, out),
            Preprocess::Reduce(p) => p.collect_params(prefix, out),
        }
    }
}

pub struct SearchCell<E: Scalar> {
    pub spec: CellSpec,
    pre0: Preprocess<E>,
    pre1: ReluConvBn<E>,
    store: WeightStore<E>,
    /// Current discrete architecture of a derived (non-mixed) cell.
    derived: RefCell<Option<CellArch>>,
    nodes: usize,
    num_ops: usize,
}

impl<E: Scalar> SearchCell<E> {
    pub fn store(&self) -> &WeightStore<E> {
        &self.store
    }

    pub fn derived_arch(&self) -> Option<CellArch> {
        self.derived.borrow().clone()
    }

    fn forward(
        &self,
        tape: &Tape<E>,
        alpha: &AlphaTable<E>,
        s0: &Tensor<E>,
        s1: &Tensor<E>,
        training: bool,
    ) -> Result<Tensor<E>> {
        let x0 = self.pre0.forward(tape, s0, training)?;
        let x1 = self.pre1.forward(tape, s1, training)?;
        let mut states = vec![x0, x1];
        // With weight sharing the op output for a (source, op) pair is
        // computed once and every consuming edge receives the same tensor.
        let mut cache: Vec<Option<Tensor<E>>> = vec![None; self.store.cache_len()];
        let mut op_out = |tape: &Tape<E>,
                          states: &[Tensor<E>],
                          src: usize,
                          dst: usize,
                          op_idx: usize|
         -> Result<Tensor<E>> {
            if self.store.is_shared() {
                let slot = self.store.cache_slot(src, op_idx);
                if cache[slot].is_none() {
                    let out = self.store.op(src, dst, op_idx).forward(tape, &states[src], training)?;
                    cache[slot] = Some(out);
                }
                Ok(cache[slot].as_ref().unwrap().clone())
            } else {
                self.store.op(src, dst, op_idx).forward(tape, &states[src], training)
            }
        };

        if self.spec.mixed {
            let table = alpha.for_kind(self.spec.kind);
            for j in INPUT_NODES..self.nodes {
                let mut acc: Option<Tensor<E>> = None;
                for i in 0..j {
                    let row = tape.row(table, edge_index(i, j))?;
                    let weights = tape.softmax(&row);
                    let mut outs = Vec::with_capacity(self.num_ops);
                    for op_idx in 0..self.num_ops {
                        outs.push(op_out(tape, &states, i, j, op_idx)?);
                    }
                    let mixed = tape.mix(&outs, &weights)?;
                    acc = Some(match acc {
                        Some(a) => tape.add(&a, &mixed)?,
                        None => mixed,
                    });
                }
                states.push(acc.expect("every node has predecessors"));
            }
        } else {
            let arch = self.derived.borrow();
            let arch = arch
                .as_ref()
                .ok_or_else(|| Error::config("derived cell has no architecture set"))?;
            for (off, picks) in arch.iter().enumerate() {
                let j = off + INPUT_NODES;
                let mut acc: Option<Tensor<E>> = None;
                for &(i, op_idx) in picks {
                    let out = op_out(tape, &states, i, j, op_idx)?;
                    acc = Some(match acc {
                        Some(a) => tape.add(&a, &out)?,
                        None => out,
                    });
                }
                states.push(acc.expect("derived node keeps at least one edge"));
            }
        }
        tape.concat_channels(&states[INPUT_NODES..])
    }

    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        self.pre0.collect_params(&format!("{prefix}.pre0"), out);
        self.pre1.collect_params(&format!("{prefix}.pre1"), out);
        self.store.collect_params(&format!("{prefix}.store"), out);
    }
}

pub struct Supernet<E: Scalar> {
    pub cfg: SupernetConfig,
    pub op_set: OpSet,
    stem_conv: Conv2d<E>,
    stem_bn: BatchNorm<E>,
    cells: Vec<SearchCell<E>>,
    pub alpha: AlphaTable<E>,
    classifier: Linear<E>,
}

impl<E: Scalar> Supernet<E> {
    pub fn build(cfg: SupernetConfig, op_set: OpSet, rng: &mut ChaCha8Rng) -> Result<Self> {
        let specs = cell_layout(&cfg)?;
        let alpha = AlphaTable::init(cfg.nodes, op_set.len(), rng)?;
        let stem_conv = Conv2d::new(rng, cfg.input_channels, cfg.channels, 3, 1, 1);
        let stem_bn = BatchNorm::new(cfg.channels, false);
        let bottleneck = cfg.channel_bottleneck.then_some(cfg.bottleneck_ratio);
        if cfg.channel_bottleneck && cfg.bottleneck_ratio == 0 {
            return Err(Error::config("bottleneck ratio must be positive"));
        }

        let mut cells = Vec::with_capacity(cfg.cells);
        let mut c_pp = cfg.channels;
        let mut c_p = cfg.channels;
        let mut sp_pp = cfg.input_hw;
        for spec in specs {
            let pre0 = if sp_pp != spec.in_spatial {
                Preprocess::Reduce(FactorizedReduce::new(rng, c_pp, spec.channels, false))
            } else {
                Preprocess::Std(ReluConvBn::new(rng, c_pp, spec.channels, 1, 1, 0, false))
            };
            let pre1 = ReluConvBn::new(rng, c_p, spec.channels, 1, 1, 0, false);
            let store = WeightStore::build(
                rng,
                spec.kind,
                cfg.nodes,
                &op_set,
                spec.channels,
                bottleneck,
                cfg.weight_sharing,
            )?;
            let out_channels = (cfg.nodes - INPUT_NODES) * spec.channels;
            sp_pp = spec.in_spatial;
            c_pp = c_p;
            c_p = out_channels;
            cells.push(SearchCell {
                nodes: cfg.nodes,
                num_ops: op_set.len(),
                spec,
                pre0,
                pre1,
                store,
                derived: RefCell::new(None),
            });
        }
        let last_channels = c_p;
        let classifier = Linear::new(rng, last_channels, cfg.classes);
        let net = Supernet {
            cfg,
            op_set,
            stem_conv,
            stem_bn,
            cells,
            alpha,
            classifier,
        };
        net.rederive()?;
        Ok(net)
    }

    pub fn cells(&self) -> &[SearchCell<E>] {
        &self.cells
    }

    /// Refresh every derived cell from the current top-weighted ops of the
    /// matching trainable cell.
    pub fn rederive(&self) -> Result<()> {
        if !self.cfg.derived_cells {
            return Ok(());
        }
        let snap = self.alpha.snapshot();
        let normal = derive_cell_arch(&snap.normal, snap.nodes, &self.op_set)?;
        let reduction = derive_cell_arch(&snap.reduction, snap.nodes, &self.op_set)?;
        for cell in &self.cells {
            if !cell.spec.mixed {
                let arch = match cell.spec.kind {
                    CellKind::Normal => normal.clone(),
                    CellKind::Reduction => reduction.clone(),
                };
                *cell.derived.borrow_mut() = Some(arch);
            }
        }
        Ok(())
    }

    pub fn forward(&self, tape: &Tape<E>, x: &Tensor<E>, training: bool) -> Result<Tensor<E>> {
        let shape = x.shape();
        let expect = [shape[0], self.cfg.input_channels, self.cfg.input_hw.0, self.cfg.input_hw.1];
        if shape.len() != 4 || shape[1..] != expect[1..] {
            return Err(Error::shape(
                "supernet",
                format!("batch {:?} vs stem {:?}", shape, expect),
            ));
        }
        let stem = self.stem_conv.forward(tape, x)?;
        let stem = self.stem_bn.forward(tape, &stem, training)?;
        let mut s0 = stem.clone();
        let mut s1 = stem;
        for cell in &self.cells {
            let out = cell.forward(tape, &self.alpha, &s0, &s1, training)?;
            s0 = std::mem::replace(&mut s1, out);
        }
        let pooled = tape.global_avg_pool(&s1)?;
        self.classifier.forward(tape, &pooled)
    }

    /// Operation/stem/classifier weights — everything the w-optimizer owns.
    pub fn w_params(&self) -> Vec<(String, Tensor<E>)> {
        let mut out = Vec::new();
        self.stem_conv.collect_params("stem.conv", &mut out);
        self.stem_bn.collect_params("stem.bn", &mut out);
        for cell in &self.cells {
            cell.collect_params(&format!("cells.{}", cell.spec.index), &mut out);
        }
        self.classifier.collect_params("classifier", &mut out);
        out
    }

    pub fn alpha_params(&self) -> Vec<(String, Tensor<E>)> {
        self.alpha.params()
    }

    pub fn set_w_requires_grad(&self, v: bool) {
        for (_, p) in self.w_params() {
            p.set_requires_grad(v);
        }
    }

    pub fn num_edges(&self) -> usize {
        num_edges(self.cfg.nodes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::opset::OpKind;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn layout_places_reductions_and_doubles_channels() {
        let cfg = SupernetConfig { cells: 8, channels: 8, ..Default::default() };
        let specs = cell_layout(&cfg).unwrap();
        let kinds: Vec<CellKind> = specs.iter().map(|s| s.kind).collect();
        assert_eq!(kinds[2], CellKind::Reduction);
        assert_eq!(kinds[5], CellKind::Reduction);
        assert_eq!(kinds.iter().filter(|k| **k == CellKind::Reduction).count(), 2);
        assert_eq!(specs[0].channels, 8);
        assert_eq!(specs[2].channels, 16);
        assert_eq!(specs[5].channels, 32);
        assert_eq!(specs[7].out_spatial, (4, 4));
        // derived-cell mode: exactly one mixed cell per kind
        let mixed: Vec<usize> = specs.iter().filter(|s| s.mixed).map(|s| s.index).collect();
        assert_eq!(mixed, vec![0, 2]);
    }

    #[test]
    fn two_alpha_tables_regardless_of_depth() {
        for cells in [4usize, 8] {
            let cfg = SupernetConfig { cells, nodes: 4, channels: 4, ..Default::default() };
            let net = Supernet::<f32>::build(cfg, OpSet::default_darts(), &mut rng(1)).unwrap();
            assert_eq!(net.alpha.scalar_count(), 2 * 5 * 8);
            for cell in net.cells() {
                if !cell.spec.mixed {
                    let arch = cell.derived_arch().unwrap();
                    for picks in &arch {
                        assert_eq!(picks.len(), 2, "one op per retained edge, two edges");
                    }
                }
            }
        }
    }

    #[test]
    fn derived_cells_need_two_cells() {
        let cfg = SupernetConfig { cells: 1, ..Default::default() };
        assert!(cell_layout(&cfg).is_err());
    }

    #[test]
    fn shared_store_counts_match_combinatorics() {
        // N=6 normal cell: 5 source nodes × 4 parametric ops vs 14 edges × 4.
        let op_set = OpSet::default_darts();
        let shared =
            WeightStore::<f32>::build(&mut rng(3), CellKind::Normal, 6, &op_set, 8, None, true)
                .unwrap();
        assert_eq!(shared.weighted_object_count(), 5 * 4);
        let per_edge =
            WeightStore::<f32>::build(&mut rng(3), CellKind::Normal, 6, &op_set, 8, None, false)
                .unwrap();
        assert_eq!(per_edge.weighted_object_count(), 14 * 4);
        // Reduction: sources 0,1 gain a parametric skip (factorized reduce).
        let red =
            WeightStore::<f32>::build(&mut rng(3), CellKind::Reduction, 6, &op_set, 8, None, true)
                .unwrap();
        assert_eq!(red.weighted_object_count(), 2 * 5 + 3 * 4);
    }

    #[test]
    fn shared_edges_reference_identical_weight_objects() {
        let op_set = OpSet::default_darts();
        let store =
            WeightStore::<f32>::build(&mut rng(4), CellKind::Normal, 4, &op_set, 8, None, true)
                .unwrap();
        let sep = op_set.index_of("sep_conv_3x3").unwrap();
        let mut a = Vec::new();
        let mut b = Vec::new();
        store.op(0, 2, sep).collect_params("x", &mut a);
        store.op(0, 3, sep).collect_params("x", &mut b);
        assert!(!a.is_empty());
        for ((_, pa), (_, pb)) in a.iter().zip(&b) {
            assert_eq!(pa.storage_id(), pb.storage_id());
        }
    }

    #[test]
    fn desk_forward_shape() {
        let cfg = SupernetConfig {
            cells: 4,
            channels: 8,
            nodes: 4,
            classes: 10,
            ..Default::default()
        };
        let net = Supernet::<f32>::build(cfg, OpSet::default_darts(), &mut rng(7)).unwrap();
        let tape = Tape::inference();
        let x = Tensor::randn(&[32, 1, 16, 16], 1.0, &mut rng(8));
        let logits = net.forward(&tape, &x, false).unwrap();
        assert_eq!(logits.shape(), vec![32, 10]);
    }

    #[test]
    fn forward_is_deterministic_for_a_seed() {
        let build = || {
            let cfg = SupernetConfig { cells: 4, channels: 4, nodes: 4, ..Default::default() };
            let net = Supernet::<f32>::build(cfg, OpSet::default_darts(), &mut rng(9)).unwrap();
            let x = Tensor::randn(&[2, 1, 16, 16], 1.0, &mut rng(10));
            let tape = Tape::inference();
            net.forward(&tape, &x, false).unwrap().data().to_vec()
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn skip_only_supernet_is_repeatable_in_eval_mode() {
        let op_set = OpSet::new(vec![OpKind::SkipConnect]).unwrap();
        let cfg = SupernetConfig {
            cells: 2,
            channels: 4,
            nodes: 4,
            derived_cells: false,
            ..Default::default()
        };
        let net = Supernet::<f32>::build(cfg, op_set, &mut rng(11)).unwrap();
        let x = Tensor::randn(&[2, 1, 16, 16], 1.0, &mut rng(12));
        let a = net.forward(&Tape::inference(), &x, false).unwrap();
        let b = net.forward(&Tape::inference(), &x, false).unwrap();
        assert_eq!(*a.data(), *b.data());
    }

    #[test]
    fn rederivation_follows_alpha_flips() {
        let cfg = SupernetConfig { cells: 4, channels: 4, nodes: 4, ..Default::default() };
        let net = Supernet::<f32>::build(cfg, OpSet::default_darts(), &mut rng(13)).unwrap();
        let derived_cell = net
            .cells()
            .iter()
            .find(|c| !c.spec.mixed && c.spec.kind == CellKind::Normal)
            .unwrap();
        let before = derived_cell.derived_arch().unwrap();
        // Push one op's logit far up on every normal edge.
        {
            let mut data = net.alpha.normal.data_mut();
            for row in 0..5 {
                data[row * 8 + 5] += 20.0; // sep_conv_5x5
            }
        }
        net.rederive().unwrap();
        let after = derived_cell.derived_arch().unwrap();
        assert_ne!(before, after);
        if derived_cell.spec.kind == CellKind::Normal {
            for picks in &after {
                for &(_, op) in picks {
                    assert_eq!(op, 5);
                }
            }
        }
    }

    #[test]
    fn mixed_edge_skip_only_is_identity() {
        // OpSet = {skip-connect}: softmax weight 1 on identity ⇒ node output
        // equals its single predecessor's activation.
        let op_set = OpSet::new(vec![OpKind::SkipConnect]).unwrap();
        let tape = Tape::<f32>::new();
        let x = Tensor::randn(&[1, 4, 8, 8], 1.0, &mut rng(14));
        let alpha_row = Tensor::zeros(&[1]);
        let weights = tape.softmax(&alpha_row);
        let op = CandidateOp::<f32>::build(&mut rng(15), op_set.kinds()[0], 4, 1, None, false)
            .unwrap();
        let out = op.forward(&tape, &x, true).unwrap();
        let mixed = tape.mix(&[out], &weights).unwrap();
        for (m, xv) in mixed.data().iter().zip(x.data().iter()) {
            assert!((m - xv).abs() < 1e-7);
        }
    }
}
