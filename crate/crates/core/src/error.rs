use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("numeric overflow in {op} (node {node})")]
    NumericOverflow { op: &'static str, node: usize },

    #[error("structure mismatch: {0}")]
    Structure(String),

    #[error("out-of-vocab character {ch:?} at byte offset {offset}")]
    OutOfVocab { ch: char, offset: usize },

    #[error("sequence length {len} exceeds context length {max}")]
    LengthOverflow { len: usize, max: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("graph is not deterministic: {0}")]
    NonDeterministic(String),

    #[error("ranking reply has no \"## Ranking:\" line")]
    MissingRankingLine,

    #[error("ranking is not a permutation: {0}")]
    Permutation(String),

    #[error("answer generator {name} failed: {msg}")]
    Generator { name: String, msg: String },

    #[error("training diverged in {stage}: {detail}")]
    Divergence { stage: &'static str, detail: String },

    #[error("KL explosion: mean per-token KL {0:.3} exceeds 10")]
    KlExplosion(f64),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("ranker request failed: {0}")]
    Ranker(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
