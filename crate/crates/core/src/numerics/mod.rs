//! Dense linear algebra, differentiable building blocks, AdamW and
//! gradient checking.

mod adamw;
mod gradcheck;
mod loss;
mod matrix;
mod param;
pub mod rng;
pub(crate) mod ops;

pub use adamw::{adamw_step, OptimizerState};
pub use gradcheck::{gradcheck, Coords, GradcheckReport};
pub use loss::cross_entropy;
pub use matrix::{softmax_rows, Matrix};
pub(crate) use matrix::{gemm, softmax_backward_rows, softmax_in_place};
pub use param::{Parameter, ParameterSet};
