//! Residual-encoder 3D U-Net for PVS segmentation, written against plain
//! `f64` buffers: model and exact gradients, partial dice + cross-entropy
//! loss, Adam with a plateau schedule, augmentation, patch sampling,
//! training, sliding-window inference, checkpoints and pseudo-labelling.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod infer;
pub mod loss;
pub mod model;
pub mod ops;
pub mod optim;
pub mod pseudo;
pub mod sampling;
pub mod schedule;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::NetConfig;
pub use error::{NetError, Result};
pub use loss::{LossInputs, LossValue, LossWeights};
pub use model::{build_model, param_count, NetModel};
pub use ops::Act;
pub use train::{train, TrainConfig, TrainOutcome, TrainRequest};
