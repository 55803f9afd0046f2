use thiserror::Error;

/// Crate-wide error type. Variants are grouped by the subsystem that raises
/// them so the CLI can map them onto exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument to {op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("graph error: {0}")]
    Graph(String),

    #[error("tokenizer error: {0}")]
    Tokenizer(String),

    #[error("task generation error: {0}")]
    Task(String),

    #[error("router error: {0}")]
    Router(String),

    #[error("policy error: {0}")]
    Policy(String),

    #[error("training error at step {step} (seed {seed}): {msg}")]
    Training { step: usize, seed: u64, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("experiment stage '{stage}' failed (seed {seed}): {msg}")]
    Stage {
        stage: &'static str,
        seed: u64,
        msg: String,
    },

    #[error("selftest failed: {0}")]
    Selftest(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Exit code contract: 0 success, 1 config error, 2 runtime error,
    /// 3 selftest failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Selftest(_) => 3,
            _ => 2,
        }
    }
}
