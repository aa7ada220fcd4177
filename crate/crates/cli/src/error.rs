use t5lab::checkpoint::CheckpointError;
use t5lab::corpus::CorpusError;
use t5lab::generation::GenerationError;
use t5lab::mds::MdsError;
use t5lab::metrics::MetricsError;
use t5lab::model::ModelError;
use t5lab::ner::NerError;
use t5lab::tokenizer::TokenizerError;
use t5lab::training::TrainError;

/// Every failure a run can end with, prefixed by the module it came from.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("io: {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("corpus: {0}")]
    Corpus(#[from] CorpusError),
    #[error("tokenizer: {0}")]
    Tokenizer(#[from] TokenizerError),
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("training: {0}")]
    Train(#[from] TrainError),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("generation: {0}")]
    Generation(#[from] GenerationError),
    #[error("metrics: {0}")]
    Metrics(#[from] MetricsError),
    #[error("ner: {0}")]
    Ner(#[from] NerError),
    #[error("mds: {0}")]
    Mds(#[from] MdsError),
}

impl CliError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
