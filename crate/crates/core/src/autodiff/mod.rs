//! Minimal dense-tensor reverse-mode automatic differentiation.
//!
//! Only the operators needed by the two network branches are provided.
//! Tensors are `f64`; layouts are row-major with channels last.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradCheckReport, ParamCheck};
pub use params::{Bindings, ParamStore};
pub use tape::{sigmoid, softmax_in_place, BatchNormState, Gradients, Mode, Padding, Tape, Var, CE_FLOOR};
pub use tensor::Tensor;
pub(crate) use tape::Fnv;
