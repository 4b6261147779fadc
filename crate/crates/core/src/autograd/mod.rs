//! Dense-tensor reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every op of a forward pass together with what its
//! backward rule needs; [`Graph::backward`] sweeps the record once in reverse.

pub(crate) mod conv;
pub(crate) mod graph;
mod ops;

pub use conv::ConvGeom;
pub use graph::{Graph, Var};
pub use ops::{BatchStats, BnMode};
pub(crate) use ops::log_sum_exp;
