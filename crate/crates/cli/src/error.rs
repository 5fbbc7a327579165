use cdg_core::checkpoint::CheckpointError;
use cdg_core::config::ConfigError;
use cdg_core::data::DataError;
use cdg_core::env::EnvError;
use cdg_core::eval::EvalError;
use cdg_core::net::NetError;
use cdg_core::trainer::TrainError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("data: {0}")]
    Data(#[from] DataError),
    #[error("data: {0}")]
    Env(#[from] EnvError),
    #[error("{0}")]
    Train(#[from] TrainError),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("{0}")]
    Eval(#[from] EvalError),
    #[error("incompatible: {0}")]
    Compat(String),
    #[error("{0}")]
    Usage(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        CliError::Train(e.into())
    }
}

impl CliError {
    /// Process exit status; see the README for the mapping.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            CliError::Data(_) | CliError::Env(_) | CliError::Csv(_) => 3,
            CliError::Compat(_) => 4,
            CliError::Eval(EvalError::BadParams(_)) => 2,
            CliError::Eval(_) => 3,
            CliError::Checkpoint(CheckpointError::Io(_)) => 1,
            CliError::Checkpoint(_) => 4,
            CliError::Train(e) => match e {
                TrainError::Config(_) => 2,
                TrainError::Net(_) | TrainError::HeadCountMismatch { .. } => 4,
                TrainError::Env(_) => 3,
                TrainError::Eval(EvalError::BadParams(_)) => 2,
                _ => 1,
            },
            CliError::Io(_) | CliError::Json(_) => 1,
        }
    }
}
