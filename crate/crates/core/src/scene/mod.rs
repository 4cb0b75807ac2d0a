//! Articulated proxy geometry, cameras and synthetic sequences.

pub mod camera;
pub mod dataset;
pub mod generator;
pub mod model;

pub use camera::{project_weak_perspective, WeakPerspectiveCamera};
pub use generator::{
    generate_sequence, procedural_motion, rasterize_pose, silhouette_iou, Frame, SceneConfig,
    SyntheticSequence,
};
pub use model::{build_chain_model, skin_mesh, CoarseMesh, Pose, Skeleton};
