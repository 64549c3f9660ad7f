use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token id {token} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { token: u32, vocab_size: usize },
    #[error("sequence length {len} exceeds max_positions {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("schema version {found} is not supported (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },
    #[error("circuit document: {0}")]
    CircuitFormat(String),
    #[error("invalid member: {0}")]
    InvalidMember(String),
    #[error("granularity mismatch: expected {expected}, found {found}")]
    GranularityMismatch { expected: String, found: String },
    #[error("task: {0}")]
    Task(String),
    #[error("task file line {line}: {message}")]
    TaskLine { line: usize, message: String },
    #[error("requested {requested} examples but only {capacity} distinct combinations exist")]
    CapacityExceeded { requested: usize, capacity: usize },
    #[error("clean and corrupted activations differ in shape")]
    ShapeMismatch,
    #[error("EAP-IG needs at least one interpolation step")]
    ZeroSteps,
    #[error("{members} members exceed the exact-scoring limit of {limit}; use EAP-IG instead")]
    TooManyMembers { members: usize, limit: usize },
    #[error("degenerate task: |m - m_null| = {separation:e} does not exceed {epsilon:e}")]
    DegenerateTask { separation: f64, epsilon: f64 },
    #[error("invalid search parameters: {0}")]
    InvalidSearch(String),
    #[error("threshold {threshold} is not reached even by the full graph (F = {full})")]
    ThresholdUnreachable { threshold: f64, full: f64 },
    #[error("recall is undefined for an empty reference circuit")]
    EmptyCircuit,
    #[error("matrix: {0}")]
    Matrix(String),
    #[error("inconsistent hypergeometric counts: {0}")]
    Counts(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
