//! Cross-year cropland field segmentation under temporal covariate shift.

pub mod error;
pub mod evaluation;
pub mod labeling;
pub mod losses_opt;
pub mod mc_inference;
pub mod normalize;
pub mod raster;
pub mod rng;
pub mod augment;
pub mod commands;
pub mod config;
pub mod container;
pub mod network;
pub mod pipeline;
pub mod scene_sim;
pub mod tensor;

pub use error::{Error, Result};
pub use raster::{Chip, LabelMask};
