//! Cell topology: N nodes, the first two are inputs, every later node
//! receives one edge from each earlier node.

use crate::error::{Error, Result};

pub const INPUT_NODES: usize = 2;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum CellKind {
    Normal,
    Reduction,
}

impl CellKind {
    pub fn name(&self) -> &'static str {
        match self {
            CellKind::Normal => "normal",
            CellKind::Reduction => "reduction",
        }
    }
}

pub fn validate_nodes(nodes: usize) -> Result<()> {
    if nodes < 3 {
        return Err(Error::config(format!(
            "a cell needs at least 3 nodes (2 inputs + 1 intermediate), got {nodes}"
        )));
    }
    Ok(())
}

/// Σ_{j=2..N-1} j edges; 5 for N=4, 14 for N=6.
pub fn num_edges(nodes: usize) -> usize {
    (INPUT_NODES..nodes).sum()
}

/// Edges ordered by (target, source); this order fixes α row indexing.
pub fn edges(nodes: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(num_edges(nodes));
    for j in INPUT_NODES..nodes {
        for i in 0..j {
            out.push((i, j));
        }
    }
    out
}

/// Row index of edge (source, target) in the (target, source) ordering.
pub fn edge_index(source: usize, target: usize) -> usize {
    debug_assert!(source < target && target >= INPUT_NODES);
    // edges before target j: 2 + 3 + ... + (j-1)
    (INPUT_NODES..target).sum::<usize>() + source
}

/// Stride of an edge: reduction cells reduce on edges leaving input nodes.
pub fn edge_stride(kind: CellKind, source: usize) -> usize {
    if kind == CellKind::Reduction && source < INPUT_NODES {
        2
    } else {
        1
    }
}
