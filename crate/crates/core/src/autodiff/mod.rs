//! Dense 2-D tensors with reverse-mode differentiation, dropout masks and
//! SGD.

mod graph;
mod optim;
mod param;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use optim::{derive_seed, grad_norm, make_dropout_mask, rng_from_seed, sgd_step};
pub use param::{ParamId, ParamStore, Parameter};
pub use tensor::{Scalar, Tensor};
