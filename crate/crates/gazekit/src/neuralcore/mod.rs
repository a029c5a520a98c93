//! Deterministic tensor/layer/optimizer substrate: batched conv stacks in
//! double precision, analytic backward passes verified against finite
//! differences, momentum SGD and a byte-stable checkpoint format.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod roi_align;
pub mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use layers::{BatchNorm, Conv1d, Conv2d, Fc, Gap, Layer, LayerSpec, Mode, Relu, Sequential};
pub use optim::SgdMomentum;
pub use roi_align::{roi_align, roi_align_backward, RoiAlignSpec, RoiTape};
pub use tensor::{Param, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("backward called without a recorded forward pass")]
    NoForwardState,
    #[error("RoI does not intersect the feature extent")]
    EmptyRoi,
}
