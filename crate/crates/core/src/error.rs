use thiserror::Error;

/// Errors produced anywhere in the link simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported constellation order {0}; expected one of 4, 16, 64, 256")]
    UnsupportedOrder(usize),
    #[error("constellation parameter must be positive and finite, got {0}")]
    InvalidRadius(f64),
    #[error("symbol block must contain at least one symbol")]
    EmptyBlock,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("cannot normalize the power of an all-zero block")]
    ZeroPower,
    #[error("degenerate channel coefficient, |h| = {0:e}")]
    DegenerateChannel(f64),
    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("invalid standard deviation {0}; must be strictly positive")]
    InvalidSigma(f64),
    #[error("constellation fit left the admissible range: r = {0}")]
    Diverged(f64),
    #[error("non-finite gradient for {0}")]
    NonFiniteGradient(String),
    #[error("agent pretraining failed: test mse {mse:.5} is above threshold {threshold}")]
    AgentNotConverged { mse: f64, threshold: f64 },
    #[error("numerical abort: {0}")]
    Numerical(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed container: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Process exit code for the CLI: 2 for configuration problems, 3 for
    /// numerical aborts, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::UnsupportedOrder(_) | Error::InvalidRadius(_) => 2,
            Error::NonFinite(_)
            | Error::NonFiniteGradient(_)
            | Error::Numerical(_)
            | Error::Diverged(_)
            | Error::AgentNotConverged { .. } => 3,
            _ => 1,
        }
    }
}
