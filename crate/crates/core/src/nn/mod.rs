//! Convolutional network primitives, the upscaling architecture, and training.

pub mod adam;
pub mod gradcheck;
pub mod model;
pub mod network;
pub mod ops;
pub mod tensor;
pub mod train;

pub use adam::{AdamConfig, AdamState};
pub use model::{decode_model, load_model, save_model, SavedModel};
pub use network::{build_srnet, LayerParams, LayerSpec, Mode, Network, NetworkParams, NetworkSpec, Node, SrNetConfig, Tape};
pub use tensor::{Scalar, Tensor4};
pub use train::{loss_curve_csv, EpochLog, TrainConfig, TrainPair, Trainer};
