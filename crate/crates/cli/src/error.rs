use std::path::PathBuf;

use gsglab_core::data::DataError;
use gsglab_core::eval::EvalError;
use gsglab_core::nn::NnError;
use gsglab_core::train::TrainError;
use thiserror::Error;

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] NnError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("all {0} cells failed")]
    AllCellsFailed(usize),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Self::Io { path, source }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) | Self::Usage(_) | Self::Data(_) | Self::Checkpoint(_) => EXIT_USAGE,
            Self::Train(e) if e.is_numerical() => EXIT_NUMERICAL,
            Self::Train(_) => EXIT_USAGE,
            Self::Eval(EvalError::NonFiniteProbe(_) | EvalError::DegenerateFeature(_)) => {
                EXIT_NUMERICAL
            }
            Self::Eval(_) => EXIT_USAGE,
            Self::AllCellsFailed(_) => EXIT_NUMERICAL,
            Self::Io { .. } => EXIT_FAILURE,
        }
    }
}
