use std::path::PathBuf;

/// Errors of the IO, CLI and experiment layer.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] ecacl_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("length error: {what} needs {needed} bytes, {available} available")]
    Length {
        what: String,
        needed: u64,
        available: u64,
    },
    #[error("configuration error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 configuration, 3 numeric failure, 4 I/O or format.
    pub fn exit_code(&self) -> i32 {
        use ecacl_core::Error as C;
        match self {
            Self::Config(_) => 2,
            Self::Io { .. } | Self::Format(_) | Self::Length { .. } => 4,
            Self::Core(e) => match e {
                C::Config(_) | C::Parameter(_) | C::Coverage { .. } => 2,
                C::Numeric(_) | C::Domain { .. } | C::Contract(_) => 3,
                C::Dimension { .. } | C::Shape(_) => 4,
            },
        }
    }
}
