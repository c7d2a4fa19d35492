//! Scaled point-wise attention, `φ = L^-α · h`, as a drop-in replacement for softmax
//! attention, plus a miniature Vision Transformer and training loop to study it.

pub mod activation;
pub mod attention;
pub mod bench;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod init_stats;
pub mod norm;
pub mod oracle;
pub mod real;
pub mod sweep;
pub mod tensor;
pub mod train;
pub mod vit;

pub use activation::{apply_activation, softmax_rows, Activation};
pub use attention::{AttentionConfig, AttentionWeights, ReductionStats};
pub use error::{Error, Result};
pub use real::Real;
pub use tensor::{matmul, Tensor};
pub use vit::{ViTConfig, ViTParams};
