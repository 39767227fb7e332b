//! Cell-based search space: candidate op set, mixed edges, weight sharing,
//! channel bottleneck and derived cells.

pub mod alpha;
pub mod cell;
pub mod layers;
pub mod opset;
pub mod supernet;

pub use alpha::{AlphaSnapshot, AlphaTable};
pub use cell::{edge_index, edge_stride, edges, num_edges, CellKind, INPUT_NODES};
pub use opset::{CandidateOp, OpKind, OpSet};
pub use supernet::{cell_layout, CellSpec, Supernet, SupernetConfig};
