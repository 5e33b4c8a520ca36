//! Small convolutional detector with hand-written backprop.
//!
//! Everything numeric is generic over the scalar type: production code runs
//! f32, while gradient verification instantiates the same code at f64 so
//! finite differences are meaningful. Checkpoints always store f32.

mod checkpoint;
mod layers;
mod loss;
mod model;
mod optim;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, CHECKPOINT_VERSION};
pub use layers::{relu, relu_backward, sigmoid, upsample2x, upsample2x_backward, Conv2d};
pub use loss::{
    focal_loss, focal_loss_backward, masked_l1_loss, masked_l1_loss_backward, LossBreakdown,
    LossWeights,
};
pub use model::{DetectorModel, Gradients, ModelConfig, Outputs};
pub use optim::{optimizer_step, Adam, AdamConfig};
pub use tensor::{Scalar, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),
    #[error("checkpoint version {found} unsupported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint missing parameter '{0}'")]
    MissingParam(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}
