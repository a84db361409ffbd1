use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{}: {source}", path.display())]
    Path {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] cignn_core::Error),
}

impl CliError {
    /// 1 usage, 2 validation (bad data or missing files), 3 numerical
    /// failure.
    pub fn exit_code(&self) -> u8 {
        use cignn_core::Error as E;
        match self {
            Self::Usage(_) | Self::Core(E::Config(_)) => 1,
            Self::Core(E::NonFinite(_) | E::Convergence { .. }) => 3,
            Self::Path { .. } | Self::Core(_) => 2,
        }
    }
}
