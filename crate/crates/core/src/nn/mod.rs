//! The base classifier: architecture, feed-forward inference, training and
//! checkpoint persistence.

mod checkpoint;
mod network;
mod train;

pub use checkpoint::{Checkpoint, Role, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use network::{
    desk_cnn, desk_cnn_layers, infer_shapes, Init, LayerSpec, NetGraph, NetNodes, Network,
    Prediction,
};
pub use train::{accuracy, train, EpochStats, LrStage, TrainConfig, TrainOutcome};
