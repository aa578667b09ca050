//! Lidar super-resolution toolkit.
//!
//! High-resolution scans are synthesized by ray casting primitive scenes,
//! an encoder-decoder network learns to upscale subsampled range images, and
//! Monte-Carlo dropout discards predictions whose ensemble spread is large
//! relative to the predicted range. Results are scored with an L1 metric and
//! with ROC/AUC on log-odds occupancy maps.

pub mod config;
pub mod error;
pub mod eval;
pub mod geom;
pub mod io;
pub mod mapping;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod sim;
pub mod upscale;

pub use error::{Error, Result};
pub use geom::{
    beam_elevations, denormalize, normalize, project, subsample_rows, unproject, NormalizedImage, PointCloud,
    Pose, RangeImage, SensorIntrinsics,
};
