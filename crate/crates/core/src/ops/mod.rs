//! Plain tensor kernels. Differentiable versions live on [`crate::autodiff::Tape`].

mod activation;
mod conv;
mod dct;
mod linalg;
mod pool;
mod resize;

pub use activation::{relu, sigmoid, softmax};
pub use conv::{conv2d, conv_extent, depthwise_conv, depthwise_separable_conv};
pub use dct::{dct2, idct2};
pub use linalg::{matmul, transpose};
pub use pool::{avg_pool, pooled_extent};
pub use resize::bilinear_resize;

pub(crate) use conv::{conv2d_adjoint, conv_geometry, depthwise_conv_adjoint};
pub(crate) use pool::avg_pool_adjoint;
pub(crate) use resize::bilinear_resize_adjoint;
