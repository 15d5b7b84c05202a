//! Minimal differentiable-operator substrate: dense tensors, a gradient
//! tape, parameter storage, AdamW and the finite-difference verifier.

pub mod gradcheck;
mod ops;
pub mod optim;
pub mod param;
pub mod tape;
pub mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_coords, finite_diff_check_params, GradReport};
pub use ops::elu;
pub(crate) use ops::{check_labels, column_sums, scatter_add};
pub use optim::{adam_step, AdamConfig, AdamW};
pub use param::{Bound, ParamStore, NORM_EPS};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
