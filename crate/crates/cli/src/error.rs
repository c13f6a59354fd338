use thiserror::Error;

/// Failures mapped onto the process exit status.
#[derive(Error, Debug)]
pub enum CliError {
    /// Malformed or invalid configuration (exit 2).
    #[error("configuration error: {0}")]
    Config(String),
    /// The operation ran but did not succeed, e.g. a strict localization
    /// that failed for some query (exit 1).
    #[error("{0}")]
    Domain(String),
    #[error(transparent)]
    Core(#[from] gtbow::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Core(gtbow::Error::InvalidParameter(_)) => 2,
            _ => 1,
        }
    }

    pub fn io(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> Self + '_ {
        move |source| CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
