use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("validation: {0}")]
    Validation(String),
    #[error("state {0} out of range")]
    StateOutOfRange(usize),
    #[error("state {0} is terminal; reset the episode")]
    TerminalState(usize),
    #[error("empty action set")]
    EmptyActionSet,
    #[error("dataset has no transitions")]
    EmptyDataset,
    #[error("negative-outcome quota of {quota} unsatisfiable within {budget} attempts")]
    NegativeQuota { quota: usize, budget: usize },
    #[error("positive-outcome quota of {quota} unsatisfiable within {budget} attempts")]
    PositiveQuota { quota: usize, budget: usize },
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("dataset env `{found}` does not match `{expected}`")]
    EnvMismatch { expected: String, found: String },
    #[error("unknown env `{0}`")]
    UnknownEnv(String),
    #[error("token {token} outside vocabulary of {vocab}")]
    TokenOutOfVocab { token: usize, vocab: usize },
    #[error("non-finite loss at epoch {epoch}; lower the learning rate")]
    NonFiniteLoss { epoch: usize },
    #[error("k={k} exceeds {n} points")]
    TooFewPoints { k: usize, n: usize },
    #[error("embedding sum has zero norm")]
    ZeroNorm,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("removing cluster {0} empties the dataset")]
    EmptyComplement(i64),
    #[error("no finite distances from state {0}")]
    NoFiniteDistance(usize),
    #[error("correlation undefined: zero variance")]
    ZeroVariance,
    #[error("need at least {need} items, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("trajectory leaves the grid at state {0}")]
    OffGrid(usize),
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for errors caused by bad input rather than a failing computation.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Validation(_) | Error::UnknownEnv(_) | Error::Parse { .. } => true,
            Error::Stage { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
