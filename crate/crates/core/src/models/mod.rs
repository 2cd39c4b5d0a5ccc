//! Phase II networks and trainers: a compact 3-D convolutional
//! autoencoder for unsupervised reconstruction, an encoder+head survival
//! classifier with freeze/unfreeze/full strategies, the cross-validation
//! harness, and reconstruction/classification metrics.

mod checkpoint;
mod metrics;
mod nets;
mod train;

pub use checkpoint::{load_autoencoder, load_classifier, save_autoencoder, save_classifier};
pub use metrics::{
    classification_metrics, reconstruction_metrics, ClassifFold, ClassifReport,
    ClassificationMetrics, ReconFold, ReconReport,
};
pub use nets::{
    Autoencoder, AutoencoderSpec, Classifier, ClassifierSpec, Conv3dLayer, DenseLayer, Encoder,
    EncoderFeatures, Head, HeadKind, LinearModel, LogitModel,
};
pub use train::{
    logit_value, ssim_loss_node, ssim_node, trace_to_csv, train_classifier, train_unsupervised,
    Adam, EpochTraceRow, LrSchedule, Strategy, TrainConfig, SSIM_C1, SSIM_C2,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f32 },
    #[error("classification cohort contains a single class")]
    SingleClass,
    #[error("strategy {0} requires a pretrained encoder")]
    MissingPretrained(&'static str),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;
