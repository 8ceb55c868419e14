//! Reverse-mode automatic differentiation over dense `f32`/`f64` tensors,
//! with the convolution, normalisation and resampling kernels needed by
//! encoder-decoder segmentation networks.
//!
//! Rank-4 tensors are `(N, C, H, W)`; rank-5 tensors are `(N, C, D, H, W)`.

pub mod autograd;
pub mod gradcheck;
pub mod nn;
pub mod ops;
pub mod scalar;
pub mod tensor;

pub use autograd::{Gradients, ParamId, Var};
pub use scalar::Scalar;
pub use tensor::Tensor;
