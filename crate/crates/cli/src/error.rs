use std::path::PathBuf;

/// Everything a subcommand can fail with.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Core(#[from] pixclust_core::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed {what}: {msg}")]
    Format { what: &'static str, msg: String },
    #[error("bad JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("gradient check failed: max relative error {0:e}")]
    GradCheck(f64),
}

impl CliError {
    /// 2 for configuration and validation problems, 3 for numeric
    /// divergence, 1 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(pixclust_core::Error::NonFinite(_)) => 3,
            CliError::Io { .. } | CliError::GradCheck(_) => 1,
            _ => 2,
        }
    }

    pub(crate) fn format(what: &'static str, msg: impl Into<String>) -> Self {
        CliError::Format { what, msg: msg.into() }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| CliError::Io { path: path.into(), source })
    }
}
