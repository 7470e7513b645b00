//! int8 × int8 → int32 kernels.

pub mod activation;
pub mod conv;
pub mod fc;
pub mod gemm;

pub use activation::{dropout_pow2, maxpool2, maxpool2_backward, relu, relu_acc, relu_backward, Mode, PoolIndices};
pub use conv::{conv_forward, conv_grad_input, conv_grad_weight, im2col, ConvGeometry, I8Matrix};
pub use fc::{fc_forward, fc_grad_input, fc_grad_weight};
pub use gemm::{gemm_i8, MAX_REDUCTION};
