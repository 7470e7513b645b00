//! Neural network training with int8 tensors and int32 arithmetic.
//!
//! Tensors carry one power-of-two scale each ([`QTensor`]). Layers multiply
//! int8 operands into int32 accumulators and round back to 8 bits with
//! [`shift_and_round`]. Weight updates keep only a few significant bits of
//! each gradient, and the cross-entropy gradient is formed with shifts and
//! one integer multiply. The floating-point code in [`oracle`] exists only
//! to check and report on the integer path.

pub mod data;
pub mod error;
pub mod kernels;
pub mod loss;
pub mod network;
pub mod oracle;
pub mod qtensor;
pub mod train;

pub use error::{Error, Result};
pub use network::{InitScheme, LayerKind, LayerSpec, Network, NetworkSpec, RoundingConfig};
pub use qtensor::{effective_bitwidth, shift_and_round, AccTensor, QTensor, RoundingScheme};
pub use train::{run_training, Checkpoint, TrainConfig, Trainer};
