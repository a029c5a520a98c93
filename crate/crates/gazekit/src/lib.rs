//! gazekit: eye detection with sub-pixel landmarks, IoU tracking of
//! localized deep features, and temporal cognitive-load classification.
//!
//! The crate is organized around a desk-scale pipeline that runs end to
//! end on synthetic eye sequences with exact ground truth:
//!
//! - [`geometry`] — grid-cell box decode/encode, IoU, NMS
//! - [`subpixel`] — keypoint quantization, offset targets, exact recovery
//! - [`neuralcore`] — tensors, layers, SGD, RoI-Align, gradient checks
//! - [`detector`] — the joint eye detector with its keypoint head variants
//! - [`tracking`] — IoU association and localized feature extraction
//! - [`temporal`] — 1D-conv classifier over tracked feature sequences
//! - [`synthdata`] — parametric eye renderer and sequence generator
//! - [`datakit`] — annotation records, two-pass QC, flip augmentation
//! - [`eval`] — weighted keypoint AP, blink metrics, throughput bench
//! - [`pipeline`] — the CLI-facing commands tying everything together
//!
//! See the crate `examples/` directory for one runnable example per
//! capability, and the `gazekit` binary for the command-line surface.

pub mod datakit;
pub mod detector;
pub mod eval;
pub mod geometry;
pub mod neuralcore;
pub mod pipeline;
pub mod subpixel;
pub mod synthdata;
pub mod temporal;
pub mod tracking;

pub use geometry::{BBox, EyeState, GridSpec};
pub use subpixel::{KeypointKind, SubpixelKeypoint};
