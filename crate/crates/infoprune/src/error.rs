use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer shapes do not line up; the message names the offending axis.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Invalid argument value (labels out of range, empty probe, bad range).
    #[error("input error: {0}")]
    Input(String),

    /// A required cached state (forward trace, checkpoint artifact) is missing.
    #[error("state error: {0}")]
    State(String),

    /// Invalid model or run configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Exact enumeration requested beyond the subset budget.
    #[error("capacity error: {0}")]
    Capacity(String),

    /// A mask would split channels that residual adds force to move together.
    #[error("coupling error: layers {group:?} share a channel group and must be masked identically")]
    Coupling { group: Vec<usize> },

    /// A rewrite would leave a layer with zero channels.
    #[error("degenerate layer error: rewrite would remove every channel of layer {0}")]
    DegenerateLayer(usize),

    /// Requested budget cannot be met; reports the tightest achievable one.
    #[error("infeasible budget: requested kept fraction {requested:.6}, tightest achievable is {tightest:.6}")]
    Infeasible { requested: f64, tightest: f64 },

    /// Malformed or truncated on-disk artifact.
    #[error("format error: {0}")]
    Format(String),

    /// Numerical failure (non-finite values, non-convergence).
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI contract: 2 input/config, 3 infeasible/empty,
    /// 4 internal numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Infeasible { .. } => 3,
            Error::Numerical(_) => 4,
            _ => 2,
        }
    }
}
