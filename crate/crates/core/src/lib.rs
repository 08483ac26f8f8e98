//! Volumetric esophageal tumor segmentation on CT.
//!
//! The crate bundles everything needed to run a desk-scale segmentation
//! experiment end to end:
//!
//! * [`volgrid`]: volume containers, a MetaImage-style file format and resampling
//! * [`phantom`]: synthetic CT phantoms with ground-truth tumor masks
//! * [`pipeline`]: patch sampling, noise augmentation and a concurrent batch stream
//! * [`network`]: a small tensor engine and the dilated dense attention U-Net family
//! * [`losses`]: Dice, boundary, distance-map and focal Dice losses
//! * [`trainer`]: Adam training loop with checkpointing and validation tracking
//! * [`inference`]: whole-volume (optionally tiled) inference and post-processing
//! * [`distance`]: exact Euclidean distance transforms
//! * [`metrics`]: DSC, surface distances, HD95, cranial/caudal errors, PR/AUC
//! * [`report`]: per-split and per-tag aggregation of metric tables

pub mod distance;
pub mod error;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod phantom;
pub mod pipeline;
pub mod report;
pub mod trainer;
pub mod volgrid;

pub use error::{Error, Result};
pub use losses::{LossConfig, SignedDistanceField};
pub use metrics::SegmentationMetrics;
pub use network::{Network, NetworkConfig, Variant};
pub use phantom::{PhantomCase, PhantomSpec, Tag};
pub use pipeline::{PatchSample, SamplerConfig};
pub use trainer::{TrainConfig, TrainLog};
pub use volgrid::{BinaryMask, Geometry, VolumeGrid};
