//! Error types shared across the crate.

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Malformed arguments: unknown names, bad indices, overlapping sets, ...
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A selection configuration or rank-test spec that cannot be honored.
    #[error("configuration error: {0}")]
    Config(String),

    /// Rejection sampling whose acceptance rate fell below the floor.
    #[error(
        "infeasible selection: accepted {accepted} of {proposals} proposals \
         (rate {rate:.2e} below floor {floor:.2e})"
    )]
    InfeasibleSelection {
        proposals: u64,
        accepted: u64,
        rate: f64,
        floor: f64,
    },

    /// Conditioning on responses whose joint covariance is singular.
    #[error("degenerate selection: {0}")]
    DegenerateSelection(String),

    /// Numerical failure that the model invariants should have excluded.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Parse failure in one of the JSON/CSV file formats, anchored to a line
    /// when one can be attributed.
    #[error("{}{msg}", .line.map(|l| format!("line {l}: ")).unwrap_or_default())]
    Parse { line: Option<usize>, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn parse_at(line: Option<usize>, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            msg: msg.into(),
        }
    }

    /// Process exit code used by the CLI: 1 for input/configuration errors,
    /// 2 for numerical or statistical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidInput(_) | Error::Config(_) | Error::Parse { .. } | Error::Io(_) => 1,
            Error::InfeasibleSelection { .. }
            | Error::DegenerateSelection(_)
            | Error::Numerical(_) => 2,
        }
    }
}
