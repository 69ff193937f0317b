//! Differentiable primitives, implemented as methods on [`Var`](crate::autodiff::Var).

pub mod conv;
pub mod dft;
pub mod elementwise;
pub mod gather;
pub mod matmul;
pub mod norm;
pub mod resample;

pub use conv::conv_out_extent;
pub use elementwise::{gelu_scalar, sigmoid, softplus_inverse, softplus_scalar};
pub use gather::{crop_indices, hflip_indices, reflect_pad_indices};
pub use norm::{BatchStats, NormMode, RunningStats, NORM_EPS};
