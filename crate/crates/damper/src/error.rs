use std::path::PathBuf;

pub type Result<T, E = DamperError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum DamperError {
    #[error(transparent)]
    Core(#[from] damper_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("image {path}: {reason}")]
    Image { path: PathBuf, reason: String },
    #[error("checkpoint section {section}: {reason}")]
    Checkpoint { section: &'static str, reason: String },
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
    #[error("studies without both a generation and a reference: {}", .0.join(", "))]
    MissingStudies(Vec<String>),
    #[error("{0}")]
    Usage(String),
}

impl DamperError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Bad invocation (exit 1) versus failure while running (exit 2).
    pub fn is_usage(&self) -> bool {
        matches!(self, Self::Usage(_) | Self::Core(damper_core::Error::Config { .. }))
    }
}
