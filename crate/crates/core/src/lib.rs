//! Two-stage lesion detection on synthetic grayscale scans.
//!
//! The pipeline: a small convolutional backbone feeds a top-down feature
//! pyramid, which is re-augmented bottom-up; a region proposal head
//! scores dense anchors on every pyramid level; sampled regions are
//! pooled from three neighboring levels and fused into fixed-size
//! descriptors; a non-local attention block models long-range
//! dependencies inside enlarged regions; small fully-connected heads
//! produce a lesion score and a box refinement. Training, evaluation
//! (IOU matching, ROC/AUC, FROC), synthetic data generation and
//! checkpointing are all included; everything is float64 and
//! deterministic under a fixed seed.

pub mod anchors;
pub mod backbone;
pub mod boxes;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dc;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod gradcheck;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pyramid;
pub mod rpn;
pub mod tensor;
pub mod train;
pub(crate) mod util;

pub use boxes::BBox;
pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use error::{Error, Result};
pub use metrics::Detection;
pub use model::Detector;
pub use tensor::{GradTape, Tensor};
pub use util::write_atomic;
