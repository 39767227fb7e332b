//! Architecture parameters: one `[num_edges × |O|]` logit matrix per cell
//! kind, regardless of how many cells the supernet stacks.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Scalar, Tensor};
use crate::error::Result;

use super::cell::{num_edges, validate_nodes, CellKind};

pub struct AlphaTable<E: Scalar> {
    pub normal: Tensor<E>,
    pub reduction: Tensor<E>,
    pub nodes: usize,
    pub num_ops: usize,
}

impl<E: Scalar> AlphaTable<E> {
    /// Near-zero random logits so the initial mixture is near-uniform.
    pub fn init(nodes: usize, num_ops: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        validate_nodes(nodes)?;
        let rows = num_edges(nodes);
        Ok(AlphaTable {
            normal: Tensor::randn(&[rows, num_ops], 1e-3, rng).requires_grad_(true),
            reduction: Tensor::randn(&[rows, num_ops], 1e-3, rng).requires_grad_(true),
            nodes,
            num_ops,
        })
    }

    pub fn for_kind(&self, kind: CellKind) -> &Tensor<E> {
        match kind {
            CellKind::Normal => &self.normal,
            CellKind::Reduction => &self.reduction,
        }
    }

    pub fn scalar_count(&self) -> usize {
        self.normal.numel() + self.reduction.numel()
    }

    pub fn params(&self) -> Vec<(String, Tensor<E>)> {
        vec![
            ("alpha.normal".to_string(), self.normal.clone()),
            ("alpha.reduction".to_string(), self.reduction.clone()),
        ]
    }

    pub fn set_requires_grad(&self, v: bool) {
        self.normal.set_requires_grad(v);
        self.reduction.set_requires_grad(v);
    }

    pub fn snapshot(&self) -> AlphaSnapshot {
        AlphaSnapshot {
            nodes: self.nodes,
            num_ops: self.num_ops,
            normal: to_rows(&self.normal, self.num_ops),
            reduction: to_rows(&self.reduction, self.num_ops),
        }
    }
}

fn to_rows<E: Scalar>(t: &Tensor<E>, cols: usize) -> Vec<Vec<f64>> {
    let flat = t.to_f64_vec();
    flat.chunks(cols).map(|c| c.to_vec()).collect()
}

/// Plain-value copy of an α table; the input to genotype derivation.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaSnapshot {
    pub nodes: usize,
    pub num_ops: usize,
    pub normal: Vec<Vec<f64>>,
    pub reduction: Vec<Vec<f64>>,
}

impl AlphaSnapshot {
    pub fn rows(&self, kind: CellKind) -> &[Vec<f64>] {
        match kind {
            CellKind::Normal => &self.normal,
            CellKind::Reduction => &self.reduction,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn alpha_count_is_two_tables_worth() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = AlphaTable::<f32>::init(6, 8, &mut rng).unwrap();
        assert_eq!(a.scalar_count(), 2 * 14 * 8);
        assert!(a.normal.requires_grad());
    }

    #[test]
    fn too_few_nodes_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!(AlphaTable::<f32>::init(2, 8, &mut rng).is_err());
    }
}
