//! Crate-wide error type.
//!
//! Every fallible operation in the pipeline returns [`Result`]. Variants are
//! grouped by how the CLI maps them to exit codes: invalid input and format
//! errors are usage problems, the `Poisoned*` variants indicate a numerical
//! failure inside training or decoding.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Caller handed us data that violates a documented precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A file could not be read or written.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file exists but its contents do not match the expected format.
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    /// A pitch operation needs at least one voiced frame and found none.
    #[error("no pitch: {0}")]
    NoPitch(String),

    /// Speaker pitch statistics are degenerate (zero variance).
    #[error("degenerate stats: {0}")]
    DegenerateStats(String),

    /// A metric has no defined value for the given inputs.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// The CTC lattice cannot emit the target within the given frame count.
    #[error("infeasible target: {0}")]
    InfeasibleTarget(String),

    /// A checkpoint does not match the model definition it is loaded into.
    #[error("invalid checkpoint: {0}")]
    InvalidCheckpoint(String),

    /// An optimizer step saw a non-finite gradient.
    #[error("poisoned step: non-finite gradient in parameter `{param}`")]
    PoisonedStep { param: String },

    /// Training produced a non-finite loss; the last good checkpoint is kept.
    #[error("poisoned training: {0}")]
    PoisonedTraining(String),

    /// Auto-regressive decoding produced a non-finite activation.
    #[error("poisoned decode at step {step}: {reason}")]
    PoisonedDecode { step: usize, reason: String },

    /// Gradient verification cannot run (e.g. the model is not deterministic).
    #[error("verification impossible: {0}")]
    VerificationImpossible(String),

    /// Invariant that should be unreachable by construction.
    #[error("internal error: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format { path: path.into(), reason: reason.into() }
    }
}
