use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("k = {k} out of range 1..={n}")]
    TopK { k: usize, n: usize },

    #[error("class id {id} out of range for {classes} classes (position {position})")]
    TargetOutOfRange {
        id: usize,
        classes: usize,
        position: usize,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("seed is not a scalar node on this tape")]
    SeedNotOnTape,

    #[error("pgn parse error in game {game} at byte {offset}: {msg}")]
    Parse {
        game: usize,
        offset: usize,
        msg: String,
    },

    #[error("illegal move '{san}': {msg}")]
    IllegalMove { san: String, msg: String },

    #[error("ambiguous move '{san}': {candidates} legal moves match")]
    AmbiguousMove { san: String, candidates: usize },

    #[error("character {ch:?} at offset {offset} is not in the vocabulary")]
    UnknownChar { ch: char, offset: usize },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("{0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
