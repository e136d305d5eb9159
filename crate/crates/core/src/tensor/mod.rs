//! Minimal reverse-mode autodiff over `ndarray`, sized for this model
//! family: stride-1 convolutions, pooling, bilinear upsampling, attention
//! primitives, normalization layers, and the two loss kernels.

mod conv;
mod elem;
pub mod gradcheck;
mod ops;
mod tape;

pub use conv::{conv2d_reference, max_abs_diff};
pub use elem::Elem;
pub use ops::{sigmoid_scalar, MatchPair};
pub use tape::{GradSink, Gradients, Tape, TensorRef};
