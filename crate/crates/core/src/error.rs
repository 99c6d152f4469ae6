use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record on line {line}: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("duplicate page_id {0:?}")]
    DuplicatePage(String),
    #[error("unknown page_id {0:?}")]
    UnknownPage(String),
    #[error("unknown token id {id} (vocab size {size})")]
    UnknownTokenId { id: u32, size: usize },
    #[error("invalid vocab: {0}")]
    InvalidVocab(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("question too long: {len} tokens leaves no room in a context budget of {n_c}")]
    QuestionTooLong { len: usize, n_c: usize },
    #[error("question consumes context budget: window capacity {capacity}")]
    QuestionConsumesBudget { capacity: i64 },
    #[error("passage window too long: {len} tokens exceeds the context budget")]
    PassageTooLong { len: usize },
    #[error("block too long: {len} tokens exceeds capacity {capacity}")]
    BlockTooLong { len: usize, capacity: usize },
    #[error("span ({start}, {len}) touches a special token or leaves the sequence")]
    InvalidSpan { start: usize, len: usize },
    #[error("input of {len} positions exceeds max_positions {max}")]
    InputTooLong { len: usize, max: usize },
    #[error("gold position {0} is not a candidate (passage or CLS)")]
    GoldNotCandidate(usize),
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error(
        "training diverged at step {step}: loss {loss} exceeded 10x initial loss {initial} for {run} consecutive steps"
    )]
    Diverged {
        step: usize,
        loss: f64,
        initial: f64,
        run: usize,
    },
    #[error("empty gold answer list")]
    EmptyGold,
    #[error("duplicate qid {0:?}")]
    DuplicateQid(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
