//! CLI error type with a stable process exit-code mapping.

use std::path::PathBuf;

use diffinv_core::Error as CoreError;

/// Everything that can abort a command, each mapped to a distinct exit code
/// class: 2 configuration, 3 missing artifact, 4 backend load failure,
/// 5 divergence, 1 anything else.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Unusable run configuration or dataset description.
    #[error("configuration error: {0}")]
    Config(String),

    /// An artifact directory was produced under a different configuration.
    #[error(
        "config snapshot mismatch at {path}: existing artifacts were produced \
         under a different configuration (pass --force to overwrite them)"
    )]
    SnapshotMismatch { path: PathBuf },

    /// A required input artifact does not exist.
    #[error("missing artifact {path}: {hint}")]
    MissingArtifact { path: PathBuf, hint: String },

    /// One or more triplets hit a non-finite loss during optimization.
    #[error("optimization diverged for {} triplet(s): {}", ids.len(), ids.join(", "))]
    Diverged { ids: Vec<String> },

    /// Filesystem failure outside the core artifact helpers.
    #[error("i/o failure at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Failure surfaced by the algorithm library.
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl CliError {
    /// Convenience constructor for [`CliError::Io`].
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    /// Process exit code for this failure class.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::SnapshotMismatch { .. } => 2,
            CliError::MissingArtifact { .. } => 3,
            CliError::Diverged { .. } => 5,
            CliError::Io { .. } => 1,
            CliError::Core(e) => match e {
                CoreError::UnknownBackend { .. }
                | CoreError::InvalidConfig(_)
                | CoreError::AlphaOutOfRange { .. }
                | CoreError::EmptyCaption { .. }
                | CoreError::CaptionerUnavailable { .. } => 2,
                CoreError::BackendUnavailable { .. } => 4,
                CoreError::NonFiniteLoss { .. } => 5,
                _ => 1,
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_distinct_per_failure_class() {
        assert_eq!(CliError::Config("x".into()).exit_code(), 2);
        assert_eq!(CliError::SnapshotMismatch { path: "p".into() }.exit_code(), 2);
        assert_eq!(
            CliError::MissingArtifact { path: "p".into(), hint: String::new() }.exit_code(),
            3
        );
        assert_eq!(
            CliError::Core(CoreError::BackendUnavailable {
                name: "sd21".into(),
                reason: "no runtime".into(),
            })
            .exit_code(),
            4
        );
        assert_eq!(
            CliError::Core(CoreError::UnknownBackend { name: "bogus".into() }).exit_code(),
            2
        );
        assert_eq!(CliError::Diverged { ids: vec!["t0".into()] }.exit_code(), 5);
        assert_eq!(
            CliError::io("p", std::io::Error::other("boom")).exit_code(),
            1
        );
    }
}
