//! The four Siamese SSL methods as one configurable local-training procedure.

mod losses;
mod method;
mod train;

use thiserror::Error;

pub use losses::{info_nce_queue_loss, neg_cosine_loss, nt_xent_loss, EmbeddingQueue, LossOutput};
pub use method::{LossKind, MethodConfig, Preset, DEFAULT_MOMENTUM, DEFAULT_QUEUE_SIZE};
pub use train::{
    batch_loss_and_grads, local_train, target_momentum_update, BatchGrads, ClientNets, LossRow,
    NetSpecs, TrainParams,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SslError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("row {0} has zero norm")]
    ZeroNormRow(usize),
    #[error("batch of {got} is too small, need at least {need}")]
    BatchTooSmall { need: usize, got: usize },
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("negative queue is empty")]
    EmptyQueue,
    #[error("invalid method: {0}")]
    InvalidMethod(String),
    #[error("target momentum update on a weight-shared target")]
    SharedTarget,
    #[error("local training needs at least one epoch")]
    NoEpochs,
    #[error("batch size {batch} exceeds client dataset of {samples}")]
    BatchLargerThanData { batch: usize, samples: usize },
    #[error("non-finite loss at epoch {epoch}, batch {batch} (collapse to NaN)")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error(transparent)]
    Nn(#[from] crate::nn::NnError),
    #[error(transparent)]
    Params(#[from] crate::params::ParamsError),
}
