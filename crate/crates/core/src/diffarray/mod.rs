//! Reverse-mode differentiable arrays, parameter storage, optimizers and
//! gradient verification.

mod graph;
mod gradcheck;
pub(crate) mod kernels;
mod optim;
mod params;
mod tensor;

pub use graph::{CustomOp, Graph, Var};
pub use gradcheck::{grad_check, CoordCheck, GradCheckConfig, GradCheckReport};
pub use kernels::ResizeMode;
pub use optim::{Adam, AdamConfig, EmaShadow};
pub use params::{load_checkpoint, save_checkpoint, Binding, GradMap, ParamStore};
pub use tensor::Tensor;
