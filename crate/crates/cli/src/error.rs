use secrepair_core::checkpoint::CheckpointError;
use secrepair_core::corpus::CorpusError;
use secrepair_core::dataset::DatasetError;
use secrepair_core::decode::DecodeError;
use secrepair_core::model::ModelError;
use secrepair_core::ppo::PpoError;
use secrepair_core::reward::RewardError;
use secrepair_core::tokenizer::TokenizerError;
use secrepair_core::trainer::TrainError;
use thiserror::Error;

/// Failure classes, each with its own process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("data: {0}")]
    Data(String),
    #[error("integrity: {0}")]
    Integrity(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Integrity(_) => 3,
        }
    }

    pub fn data(msg: impl std::fmt::Display) -> Self {
        CliError::Data(msg.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::data(e)
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        if e.is_integrity() {
            CliError::Integrity(e.to_string())
        } else {
            CliError::data(e)
        }
    }
}

impl From<TokenizerError> for CliError {
    fn from(e: TokenizerError) -> Self {
        match e {
            TokenizerError::Parse { .. } => CliError::Integrity(e.to_string()),
            _ => CliError::data(e),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            _ => CliError::data(e),
        }
    }
}

impl From<DecodeError> for CliError {
    fn from(e: DecodeError) -> Self {
        match e {
            DecodeError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            _ => CliError::data(e),
        }
    }
}

impl From<PpoError> for CliError {
    fn from(e: PpoError) -> Self {
        match e {
            PpoError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            _ => CliError::data(e),
        }
    }
}

macro_rules! data_error {
    ($($t:ty),*) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::data(e)
            }
        })*
    };
}

data_error!(CorpusError, DatasetError, ModelError, RewardError);
