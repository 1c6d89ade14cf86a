use std::path::PathBuf;

/// Errors raised across the simulator.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("angle out of domain: {0}")]
    Domain(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("degenerate pattern: {0}")]
    DegeneratePattern(String),

    #[error("retraction produced a zero column for antenna {antenna}")]
    DegenerateRetraction { antenna: usize },

    #[error("rank-deficient system: {0}")]
    RankDeficient(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("observation schedule infeasible: {0}")]
    ScheduleInfeasible(String),

    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
