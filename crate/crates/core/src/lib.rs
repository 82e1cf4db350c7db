//! Camera-only 3D semantic occupancy prediction.
//!
//! Surround-view images pass through a small CNN feature pyramid, fixed
//! sparse view-transformation matrices lift them into voxel volumes and BEV
//! planes, and a 3D encoder-decoder predicts per-voxel classes. An auxiliary
//! query-based detection branch adds box supervision during training.

pub mod checks;
pub mod classes;
pub mod config;
pub mod detection;
pub mod error;
pub mod geometry;
pub mod image_encoder;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod occnet;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod vt;

pub use error::{Error, Result};
pub use tensor::Tensor;
