//! DCA-NAS: differentiable cell-based architecture search under device
//! resource constraints (parameter or FLOP budgets), with lookup-graph
//! calibration between search-time and evaluation-time model size and the
//! search-time accelerations (weight sharing, channel bottleneck, derived
//! cells).
//!
//! Start from the `examples/` directory: each example is a runnable tour of
//! one capability. The `dcanas` binary wraps the same library entry points.

pub mod autodiff;
pub mod cli;
pub mod error;
pub mod cost;
pub mod data;
pub mod eval;
pub mod genotype;
pub mod lug;
pub mod search;
pub mod space;
pub mod target;

pub use error::{Error, Result};
