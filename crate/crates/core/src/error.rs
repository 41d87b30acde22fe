//! Error type shared across the engine.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("{op}: invalid argument: {detail}")]
    InvalidArg { op: &'static str, detail: String },

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward called twice on the same tape without a new forward pass")]
    TapeConsumed,

    #[error("sgd_step: non-finite gradient in parameter {index} ({name})")]
    NonFiniteGradient { index: usize, name: String },

    #[error("training diverged at epoch {epoch}: loss became non-finite (last good epoch {last_good_epoch}, loss {last_good_loss})")]
    Diverged {
        epoch: usize,
        last_good_epoch: usize,
        last_good_loss: f64,
    },

    #[error("{path}: {detail} (byte offset {offset})")]
    DataFormat {
        path: String,
        offset: u64,
        detail: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("model spec: {0}")]
    Spec(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
