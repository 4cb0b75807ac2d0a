//! Optimization: configuration, keyframes, augmentation, the step loop and
//! checkpoints.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod keyframes;
pub mod trainer;

pub use augment::{apply_crop, draw_crop, CropSpec, Sample};
pub use checkpoint::{Checkpoint, IdentityEntry, RngState};
pub use config::{CoverageSpace, TrainConfig, Variant};
pub use keyframes::{greedy_max_coverage, select_keyframes, KeyframeSet};
pub use trainer::{train, IdentityData, LossRecord, StepKind, StepPlan, Trainer};
