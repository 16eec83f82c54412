//! Cross-magnification knowledge distillation for image encoders.

pub mod encoder;
pub mod nn;
pub mod params;
pub mod raster;
pub mod data;
pub mod weights;
pub mod optim;
pub mod distill;
pub mod eval;
pub mod mil;
pub mod bench;
