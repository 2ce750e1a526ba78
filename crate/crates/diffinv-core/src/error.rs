//! Error type shared by every module in this crate.

use std::path::PathBuf;

use thiserror::Error;

/// Failures surfaced by the difference-inversion library.
#[derive(Debug, Error)]
pub enum Error {
    /// Two embedding vectors of different lengths were combined.
    #[error("embedding dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    /// A token-embedding matrix has the wrong row width for the target component.
    #[error("token width mismatch: expected {expected} columns, got {got}")]
    TokenWidthMismatch { expected: usize, got: usize },

    /// Interpolation weight outside the closed unit interval.
    #[error("interpolation weight {alpha} outside [0, 1]")]
    AlphaOutOfRange { alpha: f64 },

    /// A difference vector required to be nonzero was (numerically) zero.
    #[error("degenerate delta ({context}): direction norm below threshold")]
    DegenerateDelta { context: String },

    /// An input that must contain at least one element was empty.
    #[error("empty {what}")]
    EmptyInput { what: &'static str },

    /// Timestep index outside the noise schedule.
    #[error("timestep {t} outside schedule of length {len}")]
    TimestepOutOfRange { t: usize, len: usize },

    /// Latent tensor shape differs from what the backend produces.
    #[error("latent shape mismatch: expected {expected:?}, got {got:?}")]
    LatentShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    /// A prompt exceeds the text encoder's sequence capacity and cannot be
    /// shortened (difference tokens are never truncated).
    #[error("sequence of {len} rows exceeds maximum length {max}")]
    SequenceTooLong { len: usize, max: usize },

    /// The noise schedule violates its monotonicity/range contract.
    #[error("invalid noise schedule: {reason}")]
    InvalidSchedule { reason: String },

    /// A recognized backend that this build cannot load.
    #[error("backend '{name}' is not available in this build: {reason}")]
    BackendUnavailable { name: String, reason: String },

    /// A backend name outside the supported set.
    #[error("unknown backend '{name}' (expected one of: mock, sd21, sdxl)")]
    UnknownBackend { name: String },

    /// The selected backend ships no captioner.
    #[error(
        "backend '{backend}' has no captioner; supply captions yourself \
         (anchor.mode = \"user\" or explicit caption arguments)"
    )]
    CaptionerUnavailable { backend: String },

    /// A caption that must be non-empty was empty or all whitespace.
    #[error("empty caption for image '{image_id}'")]
    EmptyCaption { image_id: String },

    /// The optimizer hit a non-finite loss and stopped.
    #[error("non-finite loss at iteration {iteration} (value {l_total}); optimization aborted")]
    NonFiniteLoss { iteration: u64, l_total: f64 },

    /// A second gradient-bearing consumer tried to use the same backend bundle.
    #[error("gradient context already held for this backend bundle")]
    GradientContextBusy,

    /// Component wiring or configuration that cannot be executed.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// Filesystem failure while reading or writing an artifact.
    #[error("i/o failure at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// An image file that does not decode.
    #[error("image decode failure at {path}: {source}")]
    ImageDecode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    /// A tensor file whose header or payload does not parse.
    #[error("malformed tensor file {path}: {reason}")]
    TensorFormat { path: PathBuf, reason: String },
}

impl Error {
    /// Convenience constructor for [`Error::Io`].
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
