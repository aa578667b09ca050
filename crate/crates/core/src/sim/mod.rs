//! Synthetic environments and the simulated lidar.

pub mod dataset;
pub mod scene;

pub use dataset::{
    augment_pair, generate_dataset, read_dataset, write_dataset, AugmentConfig, DatasetConfig, Manifest,
    ScanPair, Trajectory,
};
pub use scene::{raycast_scan, Primitive, Scene};
