//! Wildcard-masked alignment loss and the momentum SGD trainer.

mod loss;
mod sgd;

pub use loss::{batch_loss, loss_gradients, wildcard_loss, DistanceKind, LossConfig, TrainingPair};
pub use sgd::{train, write_trace_csv, TraceRow, TrainConfig, TrainOutcome};

use thiserror::Error;

use crate::fact::WildcardMask;
use crate::linalg::ShapeError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("visual mask {visual:?} does not match language mask {language:?}")]
    MaskMismatch {
        visual: WildcardMask,
        language: WildcardMask,
    },
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("training diverged at iteration {iter}: loss is not finite")]
    Divergence { iter: usize },
    #[error("training split is empty")]
    EmptyTrainSet,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
}
