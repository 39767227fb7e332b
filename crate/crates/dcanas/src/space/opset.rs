//! Candidate operation set and per-edge operation instantiation.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Scalar, Tape, Tensor};
use crate::error::{Error, Result};

use super::layers::{Conv2d, DilConv, FactorizedReduce, SepConv};

#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub enum OpKind {
    Zero,
    SkipConnect,
    MaxPool3x3,
    AvgPool3x3,
    SepConv3x3,
    SepConv5x5,
    DilConv3x3,
    DilConv5x5,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Zero => "zero",
            OpKind::SkipConnect => "skip_connect",
            OpKind::MaxPool3x3 => "max_pool_3x3",
            OpKind::AvgPool3x3 => "avg_pool_3x3",
            OpKind::SepConv3x3 => "sep_conv_3x3",
            OpKind::SepConv5x5 => "sep_conv_5x5",
            OpKind::DilConv3x3 => "dil_conv_3x3",
            OpKind::DilConv5x5 => "dil_conv_5x5",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        Some(match name {
            "zero" => OpKind::Zero,
            "skip_connect" => OpKind::SkipConnect,
            "max_pool_3x3" => OpKind::MaxPool3x3,
            "avg_pool_3x3" => OpKind::AvgPool3x3,
            "sep_conv_3x3" => OpKind::SepConv3x3,
            "sep_conv_5x5" => OpKind::SepConv5x5,
            "dil_conv_3x3" => OpKind::DilConv3x3,
            "dil_conv_5x5" => OpKind::DilConv5x5,
            _ => return None,
        })
    }

    /// Whether an instance at this stride owns trainable weights.
    pub fn is_parametric(&self, stride: usize) -> bool {
        match self {
            OpKind::Zero | OpKind::MaxPool3x3 | OpKind::AvgPool3x3 => false,
            OpKind::SkipConnect => stride > 1,
            OpKind::SepConv3x3 | OpKind::SepConv5x5 | OpKind::DilConv3x3 | OpKind::DilConv5x5 => {
                true
            }
        }
    }

    /// Convolutional ops that the channel bottleneck wraps.
    pub fn is_bottleneck_eligible(&self) -> bool {
        matches!(
            self,
            OpKind::SepConv3x3 | OpKind::SepConv5x5 | OpKind::DilConv3x3 | OpKind::DilConv5x5
        )
    }
}

/// Ordered candidate set; α columns index into it, so the order is fixed for
/// the lifetime of a run.
#[derive(Clone, Debug)]
pub struct OpSet {
    kinds: Vec<OpKind>,
}

impl OpSet {
    pub fn new(kinds: Vec<OpKind>) -> Result<Self> {
        if kinds.is_empty() {
            return Err(Error::config("op set must not be empty"));
        }
        for (i, a) in kinds.iter().enumerate() {
            if kinds[i + 1..].contains(a) {
                return Err(Error::config(format!("duplicate op `{}` in op set", a.name())));
            }
        }
        Ok(OpSet { kinds })
    }

    pub fn default_darts() -> Self {
        OpSet {
            kinds: vec![
                OpKind::Zero,
                OpKind::SkipConnect,
                OpKind::MaxPool3x3,
                OpKind::AvgPool3x3,
                OpKind::SepConv3x3,
                OpKind::SepConv5x5,
                OpKind::DilConv3x3,
                OpKind::DilConv5x5,
            ],
        }
    }

    /// Reduced five-op set for desk-scale runs: one op per category. Fewer
    /// near-duplicate convolutions keep the softmax contest meaningful at
    /// the ~100 α-step budgets a laptop run affords.
    pub fn desk() -> Self {
        OpSet {
            kinds: vec![
                OpKind::Zero,
                OpKind::SkipConnect,
                OpKind::MaxPool3x3,
                OpKind::SepConv3x3,
                OpKind::DilConv3x3,
            ],
        }
    }

    pub fn kinds(&self) -> &[OpKind] {
        &self.kinds
    }

    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.kinds.iter().position(|k| k.name() == name)
    }

    pub fn zero_index(&self) -> Option<usize> {
        self.kinds.iter().position(|k| *k == OpKind::Zero)
    }
}

/// Inner channel width under a bottleneck of ratio `r`.
pub fn bottleneck_width(channels: usize, ratio: usize) -> usize {
    (channels / ratio).max(1)
}

/// One instantiated candidate operation on an edge (or shared by the edges of
/// one source node).
pub enum CandidateOp<E: Scalar> {
    Zero { stride: usize },
    Identity,
    FactRed(FactorizedReduce<E>),
    MaxPool { stride: usize },
    AvgPool { stride: usize },
    Sep(SepConv<E>),
    Dil(DilConv<E>),
    /// 1x1 reduce → inner op at `channels/r` → 1x1 expand.
    Bottlenecked {
        reduce: Conv2d<E>,
        inner: Box<CandidateOp<E>>,
        expand: Conv2d<E>,
    },
}

impl<E: Scalar> CandidateOp<E> {
    /// `bottleneck` is the ratio `r` when the channel bottleneck is enabled.
    pub fn build(
        rng: &mut ChaCha8Rng,
        kind: OpKind,
        channels: usize,
        stride: usize,
        bottleneck: Option<usize>,
        affine: bool,
    ) -> Result<CandidateOp<E>> {
        if let Some(r) = bottleneck {
            if r == 0 {
                return Err(Error::config("bottleneck ratio must be positive"));
            }
            if r > 1 && kind.is_bottleneck_eligible() {
                let inner_c = bottleneck_width(channels, r);
                let reduce = Conv2d::new(rng, channels, inner_c, 1, 1, 0);
                let inner = Self::build(rng, kind, inner_c, stride, None, affine)?;
                let expand = Conv2d::new(rng, inner_c, channels, 1, 1, 0);
                return Ok(CandidateOp::Bottlenecked {
                    reduce,
                    inner: Box::new(inner),
                    expand,
                });
            }
        }
        Ok(match kind {
            OpKind::Zero => CandidateOp::Zero { stride },
            OpKind::SkipConnect => {
                if stride == 1 {
                    CandidateOp::Identity
                } else {
                    CandidateOp::FactRed(FactorizedReduce::new(rng, channels, channels, affine))
                }
            }
            OpKind::MaxPool3x3 => CandidateOp::MaxPool { stride },
            OpKind::AvgPool3x3 => CandidateOp::AvgPool { stride },
            OpKind::SepConv3x3 => CandidateOp::Sep(SepConv::new(rng, channels, 3, stride, affine)),
            OpKind::SepConv5x5 => CandidateOp::Sep(SepConv::new(rng, channels, 5, stride, affine)),
            OpKind::DilConv3x3 => CandidateOp::Dil(DilConv::new(rng, channels, 3, stride, affine)),
            OpKind::DilConv5x5 => CandidateOp::Dil(DilConv::new(rng, channels, 5, stride, affine)),
        })
    }

    pub fn forward(&self, tape: &Tape<E>, x: &Tensor<E>, training: bool) -> Result<Tensor<E>> {
        match self {
            CandidateOp::Zero { stride } => {
                let s = x.shape();
                let (h, w) = (s[2] / stride, s[3] / stride);
                Ok(Tensor::zeros(&[s[0], s[1], h, w]))
            }
            CandidateOp::Identity => Ok(x.clone()),
            CandidateOp::FactRed(fr) => fr.forward(tape, x, training),
            CandidateOp::MaxPool { stride } => tape.max_pool2d(x, 3, *stride, 1),
            CandidateOp::AvgPool { stride } => tape.avg_pool2d(x, 3, *stride, 1),
            CandidateOp::Sep(op) => op.forward(tape, x, training),
            CandidateOp::Dil(op) => op.forward(tape, x, training),
            CandidateOp::Bottlenecked { reduce, inner, expand } => {
                let h = reduce.forward(tape, x)?;
                let h = inner.forward(tape, &h, training)?;
                expand.forward(tape, &h)
            }
        }
    }

    pub fn has_weights(&self) -> bool {
        !matches!(
            self,
            CandidateOp::Zero { .. }
                | CandidateOp::Identity
                | CandidateOp::MaxPool { .. }
                | CandidateOp::AvgPool { .. }
        )
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        match self {
            CandidateOp::Zero { .. }
            | CandidateOp::Identity
            | CandidateOp::MaxPool { .. }
            | CandidateOp::AvgPool { .. } => {}
            CandidateOp::FactRed(fr) => fr.collect_params(prefix, out),
            CandidateOp::Sep(op) => op.collect_params(prefix, out),
            CandidateOp::Dil(op) => op.collect_params(prefix, out),
            CandidateOp::Bottlenecked { reduce, inner, expand } => {
                reduce.collect_params(&format!("{prefix}.reduce"), out);
                inner.collect_params(&format!("{prefix}.inner"), out);
                expand.collect_params(&format!("{prefix}.expand"), out);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn default_set_has_eight_unique_ops() {
        let set = OpSet::default_darts();
        assert_eq!(set.len(), 8);
        assert_eq!(set.zero_index(), Some(0));
        assert_eq!(set.index_of("sep_conv_3x3"), Some(4));
        assert!(OpSet::new(vec![OpKind::Zero, OpKind::Zero]).is_err());
        assert!(OpSet::new(vec![]).is_err());
    }

    #[test]
    fn every_op_preserves_shape_at_stride_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tape = Tape::<f32>::inference();
        for c in [8usize, 16, 32] {
            let x = Tensor::randn(&[2, c, 8, 8], 1.0, &mut rng);
            for kind in OpSet::default_darts().kinds() {
                let op = CandidateOp::<f32>::build(&mut rng, *kind, c, 1, None, false).unwrap();
                let y = op.forward(&tape, &x, true).unwrap();
                assert_eq!(y.shape(), vec![2, c, 8, 8], "{}", kind.name());
            }
        }
    }

    #[test]
    fn every_op_halves_spatial_at_stride_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tape = Tape::<f32>::inference();
        let x = Tensor::<f32>::randn(&[2, 8, 8, 8], 1.0, &mut rng);
        for kind in OpSet::default_darts().kinds() {
            let op = CandidateOp::<f32>::build(&mut rng, *kind, 8, 2, None, false).unwrap();
            let y = op.forward(&tape, &x, true).unwrap();
            assert_eq!(y.shape(), vec![2, 8, 4, 4], "{}", kind.name());
        }
    }

    #[test]
    fn bottleneck_wrapper_preserves_output_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tape = Tape::<f32>::inference();
        for c in [8usize, 16, 32] {
            let x = Tensor::randn(&[1, c, 8, 8], 1.0, &mut rng);
            for kind in OpSet::default_darts().kinds() {
                for stride in [1usize, 2] {
                    let op =
                        CandidateOp::<f32>::build(&mut rng, *kind, c, stride, Some(4), false)
                            .unwrap();
                    let y = op.forward(&tape, &x, true).unwrap();
                    assert_eq!(
                        y.shape(),
                        vec![1, c, 8 / stride, 8 / stride],
                        "{} C={c} stride={stride}",
                        kind.name()
                    );
                }
            }
        }
    }

    #[test]
    fn ratio_one_bottleneck_is_the_plain_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let op = CandidateOp::<f32>::build(&mut rng, OpKind::SepConv3x3, 8, 1, Some(1), false)
            .unwrap();
        assert!(matches!(op, CandidateOp::Sep(_)));
        let mut params = Vec::new();
        op.collect_params("op", &mut params);
        // two depthwise (8·9) + two pointwise (8·8), no affines
        let total: usize = params.iter().map(|(_, p)| p.numel()).sum();
        assert_eq!(total, 2 * (8 * 9 + 8 * 8));
    }

    #[test]
    fn zero_ratio_bottleneck_is_a_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(
            CandidateOp::<f32>::build(&mut rng, OpKind::SepConv3x3, 8, 1, Some(0), false).is_err()
        );
    }

    #[test]
    fn skip_connect_is_exact_identity_at_stride_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tape = Tape::<f32>::inference();
        let x = Tensor::<f32>::randn(&[1, 4, 6, 6], 1.0, &mut rng);
        let op = CandidateOp::<f32>::build(&mut rng, OpKind::SkipConnect, 4, 1, Some(4), false)
            .unwrap();
        let y = op.forward(&tape, &x, true).unwrap();
        assert_eq!(x.storage_id(), y.storage_id());
    }
}
