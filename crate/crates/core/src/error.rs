use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("input is empty: {0}")]
    EmptyInput(String),

    #[error("schema error: missing column `{0}`")]
    MissingColumn(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("unknown algorithm `{0}`")]
    UnknownAlgorithm(String),

    #[error("algorithm `{0}` requires a cluster count k")]
    MissingK(String),

    #[error("requested k={k} exceeds the number of rows n={n}")]
    KExceedsRows { k: usize, n: usize },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("feature selection failed: {0}")]
    Selection(String),

    #[error("optimization failed: {0}")]
    Tuning(String),

    #[error("data mismatch: {0}")]
    Mismatch(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("binary encoding error: {0}")]
    Bincode(#[from] bincode::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input data rather than bad settings.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::EmptyInput(_)
                | Error::MissingColumn(_)
                | Error::Mismatch(_)
                | Error::Csv(_)
                | Error::Json(_)
                | Error::Bincode(_)
                | Error::Io { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
