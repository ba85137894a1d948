//! Minimal convolutional network engine: layers, SGD training, evaluation
//! and persistence.

mod layer;
mod network;
mod ops;
mod train;

pub use layer::{
    Cache, FeatureShape, Layer, LayerParams, LayerSpec, BATCH_NORM_EPS, BATCH_NORM_MOMENTUM,
};
pub use network::{
    build_vgg_mini, evaluate, images_to_tensor, NetworkSpec, PoolKind, TrainedNetwork,
    VggMiniConfig, NETWORK_FORMAT_VERSION,
};
pub use train::{sgd_step, train, train_from, EpochStats, TrainConfig};

use thiserror::Error;

use crate::container::ContainerError;

#[derive(Debug, Error)]
pub enum AnnError {
    #[error("{layer}: shape mismatch ({detail})")]
    ShapeMismatch { layer: &'static str, detail: String },
    #[error("{layer}: invalid parameters ({detail})")]
    InvalidLayer { layer: &'static str, detail: String },
    #[error("{layer}: parameters missing or of the wrong kind")]
    MissingParams { layer: &'static str },
    #[error("{layer}: backward called without a forward cache")]
    MissingCache { layer: &'static str },
    #[error("invalid network: {0}")]
    InvalidNetwork(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Divergence {
        epoch: usize,
        step: usize,
        loss: f64,
    },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Container(#[from] ContainerError),
}
