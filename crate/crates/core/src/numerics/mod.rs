//! Dense tensors, the differentiation tape, AdamW, and the finite-difference
//! gradient oracle.

mod gradcheck;
mod optim;
mod param;
mod tape;
pub mod tensor;

pub use gradcheck::{finite_difference_gradcheck, GradcheckOptions, GradcheckReport};
pub use optim::AdamW;
pub use param::{Gradients, ParamId, ParamStore, Parameter};
pub use tape::{backward, RoutingLog, Tape, Var, VjpFn};
pub use tensor::Tensor;
