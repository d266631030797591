use thiserror::Error;

/// Errors raised by every operation in the crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("softmax row {row} is entirely -inf")]
    AllMaskedRow { row: usize },

    #[error("function evaluation returned a non-finite value at component {index}")]
    NonFiniteEvaluation { index: usize },

    #[error("grid extent {extent} is not divisible by block extent {block} along {axis}")]
    IndivisibleGrid {
        axis: char,
        extent: usize,
        block: usize,
    },

    #[error("sequence length {len} is not divisible by block size {block}")]
    IndivisibleLength { len: usize, block: usize },

    #[error("top-r rank {r} out of range 1..={n_blocks}")]
    RankOutOfRange { r: usize, n_blocks: usize },

    #[error("cdf threshold {p} out of range (0, 1]")]
    ThresholdOutOfRange { p: f64 },

    #[error("query block {query_block} (batch-head {bh}) selects no key blocks")]
    EmptySelection { bh: usize, query_block: usize },

    #[error("attention stats do not match the forward call: {0}")]
    StatsMismatch(String),

    #[error("kv cache shape mismatch: {0}")]
    CacheShapeMismatch(String),

    #[error("worker count {workers} does not divide block count {blocks}")]
    IndivisibleWorkers { workers: usize, blocks: usize },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("time {t} outside the open interval (0, 1)")]
    TimeOutOfDomain { t: f64 },

    #[error("transition variance {variance} is not positive")]
    DegenerateVariance { variance: f64 },

    #[error("reward {reward} has zero dispersion across all groups")]
    ZeroDispersion { reward: usize },

    #[error("{got} weights given for {expected} rewards")]
    WeightCountMismatch { expected: usize, got: usize },

    #[error("group size {0} too small; at least 2 samples are needed")]
    GroupTooSmall(usize),

    #[error("refinement time {t} exceeds threshold {t_thresh}")]
    TimeAboveThreshold { t: f64, t_thresh: f64 },

    #[error("extent {extent} scaled by {factor} is not integral")]
    NonIntegralTarget { extent: usize, factor: f64 },

    #[error("extent mismatch: {0}")]
    ExtentMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
