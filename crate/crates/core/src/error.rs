use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, ProfitError>;

#[derive(Debug, Error)]
pub enum ProfitError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(String),

    /// The input does not have the shape the pipeline expects (ragged grids,
    /// missing columns, ...).
    #[error("structural error: {0}")]
    Structural(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("smoother error: {0}")]
    Smoother(String),

    #[error("rank deficiency: {0}")]
    Rank(String),

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<ProfitError>,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl ProfitError {
    pub fn in_stage(self, stage: &'static str) -> Self {
        ProfitError::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// The innermost error, skipping stage wrappers.
    pub fn root(&self) -> &ProfitError {
        match self {
            ProfitError::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.in_stage(stage))
    }
}

impl From<csv::Error> for ProfitError {
    fn from(e: csv::Error) -> Self {
        ProfitError::Csv(e.to_string())
    }
}
