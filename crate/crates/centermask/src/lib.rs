//! CenterMask-style insulator inspection: a compact, CPU-only,
//! deterministic implementation of anchor-free instance segmentation and
//! defect detection.
//!
//! The crate covers the full workflow end to end:
//!
//! - [`backbone`]: VoVNet-style feature extraction (OSA blocks, eSE gates).
//! - [`fpn`]: multi-scale feature pyramid.
//! - [`fcos`]: anchor-free detection head with classification, centerness
//!   and edge-distance regression, plus target assignment and losses.
//! - [`sagmask`]: spatial-attention-guided mask branch with ROI pooling.
//! - [`geometry`]: box/IOU/NMS arithmetic shared by everything above.
//! - [`data`]: Labelme ingestion, polygon rasterization, multi-scale
//!   augmentation, the synthetic dataset generator, and VOC-style XML.
//! - [`eval`]: COCO-style AP/AR metric tables for mask and box tasks.
//! - [`pipeline`]: training loop, inference, overlay rendering and CLI.
//!
//! Everything runs on `f64` with seed-driven determinism: the same seed,
//! config and data produce byte-identical checkpoints, logs and reports.
//! See the `examples/` directory for runnable entry points per capability.

pub mod backbone;
pub mod error;
pub mod eval;
pub mod fcos;
pub mod fpn;
pub mod geometry;
pub mod gradcheck;
pub mod io_util;
pub mod mask;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod sagmask;
pub mod tape;
pub mod tensor;

pub mod data;
pub mod model;

pub use error::{Error, Result};
pub use geometry::{BoxXYXY, Detection};
pub use tensor::{FeatureVolume, Tensor};
