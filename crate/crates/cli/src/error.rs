use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<CliError>,
    },

    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Lab(#[from] snaplab::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("artifacts missing at exit: {0}")]
    Incomplete(String),

    #[error("array file: {0}")]
    Npy(String),
}

impl CliError {
    pub fn in_stage(self, stage: &str) -> CliError {
        CliError::Stage { stage: stage.into(), source: Box::new(self) }
    }

    /// 2 for command-line misuse, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
