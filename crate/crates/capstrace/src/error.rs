//! Error taxonomy shared by every module in the crate.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// One variant per failure class so callers can map errors onto process
/// exit codes without string matching.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor extents do not line up (elementwise mismatch, bad reshape, ...).
    #[error("shape error: {0}")]
    Shape(String),
    /// Values outside an operation's mathematical domain (ln of <= 0, bad axis, ...).
    #[error("domain error: {0}")]
    Domain(String),
    /// Malformed or inconsistent input data (corrupt IDX, label out of range, ...).
    #[error("data error: {0}")]
    Data(String),
    /// A file did not parse as the container format it claims to be.
    #[error("format error: {0}")]
    Format(String),
    /// Invalid run or model configuration.
    #[error("config error: {0}")]
    Config(String),
    /// An operation was invoked before its prerequisites were produced.
    #[error("state error: {0}")]
    State(String),
    /// Capsule connectivity is inconsistent (orphan child, bad field geometry).
    #[error("graph error: {0}")]
    Graph(String),
    /// An API contract was violated (non-scalar backward root, rank mismatch, ...).
    #[error("contract error: {0}")]
    Contract(String),
    /// A computation produced non-finite values where finite ones are required.
    #[error("evaluation error: {0}")]
    Eval(String),
    /// Training left the stable regime (NaN loss); last good checkpoint is kept.
    #[error("divergence: {0}")]
    Divergence(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }
    pub fn graph(msg: impl Into<String>) -> Self {
        Error::Graph(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn eval(msg: impl Into<String>) -> Self {
        Error::Eval(msg.into())
    }
    pub fn divergence(msg: impl Into<String>) -> Self {
        Error::Divergence(msg.into())
    }
}
