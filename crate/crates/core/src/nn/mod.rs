//! A small CPU network engine: convolution kernels, a gradient tape,
//! parameter storage, the optimizer and the U-Net building block.

pub mod adam;
pub mod kernels;
pub mod params;
pub mod tape;
pub mod unet;

pub use adam::{Adam, AdamConfig};
pub use params::{ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use unet::{StageConfig, UNet};
