use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("dimension mismatch: {left} vs {right}")]
    Shape { left: usize, right: usize },

    #[error("fewer than {threshold}+1 shared keys available ({available}); path-key establishment required")]
    InsufficientSharedKeys { available: usize, threshold: usize },

    #[error("path-key establishment failed: {0}")]
    PathKeyFailure(String),

    #[error("authentication failure: {0}")]
    AuthenticationFailure(String),

    #[error("signature rejected: {0}")]
    Forgery(String),

    #[error("stale timestamp: message t={message}, now={now}, window={window}")]
    Replay { message: u64, now: u64, window: u64 },

    #[error("round aborted: {0}")]
    AbortRound(String),

    #[error("degenerate round: total weight is zero")]
    DegenerateRound,

    #[error("aggregate magnitude too close to the modulus; widen the fixed-point width")]
    OverflowGuard,

    #[error("collusion attack infeasible: {0}")]
    AttackInfeasible(String),

    #[error("malformed wire data: {0}")]
    Wire(String),

    #[error("invalid scenario config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn parameter(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }
}
