//! Differentiable tensor substrate: recorded forward ops, reverse-mode
//! gradients, the optimizer, and finite-difference checking.

pub mod adam;
pub mod einsum;
pub mod gradcheck;
pub mod graph;
pub mod param;
mod triangular;

pub use adam::{Adam, AdamConfig};
pub use einsum::{contract, EinsumSpec};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Graph, Var, LAYER_NORM_EPS, MASK_PENALTY};
pub use param::{ParamId, ParamStore, Parameter};
