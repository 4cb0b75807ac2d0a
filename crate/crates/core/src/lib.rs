//! Articulated neural rendering on a small proxy mesh.
//!
//! A coarse skinned mesh is rasterized to a uv map, a learned neural texture
//! is sampled through it, and a two-stage convolutional renderer turns the
//! sampled features into an RGB image and a foreground mask.

pub mod avatar;
pub mod error;
pub mod imageio;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod parallel;
pub mod plot;
pub mod rasterizer;
pub mod renderer;
pub mod scene;
pub mod tensor;
pub mod texture;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
