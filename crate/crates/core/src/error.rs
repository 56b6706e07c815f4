use thiserror::Error;

use clue_tensor::TensorError;

#[derive(Debug, Error)]
pub enum ClueError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("row {row}, column `{column}`: cannot parse `{value}`")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },
    #[error("column `{column}`: unknown category `{value}`")]
    UnknownCategory { column: String, value: String },
    #[error("column `{0}` has zero standard deviation")]
    ZeroVariance(String),
    #[error("column `{0}` is not continuous")]
    NotContinuous(String),
    #[error("idx decode failed at byte {offset}: {reason}")]
    Idx { offset: usize, reason: String },
    #[error("non-finite {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },
    #[error("sampler diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },
    #[error("training diverged at epoch {epoch}: {what} = {value}")]
    TrainingDiverged {
        epoch: usize,
        what: &'static str,
        value: f64,
    },
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("negative epistemic uncertainty {0} beyond rounding tolerance")]
    NegativeUncertainty(f64),
    #[error("task kind mismatch: {0}")]
    TaskMismatch(String),
    #[error("only {got} rejected test points (need at least {need}); increase the synthetic sample")]
    TooFewRejected { got: usize, need: usize },
    #[error("counterfactual search for row {row} diverged at iteration {iteration}")]
    ClueDiverged {
        row: usize,
        iteration: usize,
        losses: Vec<f64>,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ClueError>;

pub(crate) fn io_err(path: impl AsRef<std::path::Path>) -> impl FnOnce(std::io::Error) -> ClueError {
    let path = path.as_ref().display().to_string();
    move |source| ClueError::Io { path, source }
}
