//! Numeric primitives with hand-derived backward passes.

mod conv;
mod gate;
mod gradcheck;
mod softmax;
mod tensor;

pub use conv::{Grid, MaskType, MaskedKernel, Pointwise, Stack};
pub use gate::{gated_activation, gated_activation_backward};
pub use gradcheck::{gradient_check, relative_error, GradCheckReport};
pub use softmax::{softmax, softmax_xent};
pub use tensor::Tensor;

pub(crate) use gate::{gate_backward_planes, gate_planes};
