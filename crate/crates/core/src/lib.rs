//! Cross-modal IMU/video representation learning: preprocessing, encoders,
//! sigmoid contrastive alignment, evaluation protocols, synthetic data, and
//! file formats.

pub mod align;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod imu_encoder;
pub mod model;
pub mod nn;
pub mod signal;
pub mod synthdata;
pub mod train;
pub mod verify;
pub mod video_encoder;

pub use error::{Error, Result};
