//! Dense `f64` tensors with tape-based reverse-mode automatic
//! differentiation, an Adam optimizer, and finite-difference gradient
//! checking.

pub mod gradcheck;
pub mod graph;
pub mod init;
mod kernels;
pub mod optim;
pub mod params;
pub mod suite;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_many, grad_check_params, relative_error, GradCheckReport};
pub use graph::{BatchStats, Graph, Var, MASKED};
pub use init::Rng;
pub use optim::Adam;
pub use params::{BoundParams, ParamEntry, ParamId, ParamKind, ParamStore};
pub use suite::{covered_ops, op_suite, OpCheck};
pub use tensor::{Result, Tensor, TensorError};
