use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Missing or malformed column mapping, bad CSV header.
    #[error("schema error: {0}")]
    Schema(String),

    /// Values outside the admissible domain (e.g. exposure not in {0,1}).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("empty data: {0}")]
    EmptyData(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A precondition of an estimator or fit was not met.
    #[error("precondition failed: {0}")]
    Precondition(String),

    /// Linear estimating equations have a singular moment matrix.
    #[error("rank deficiency in {context}: instrument dimension {dim} is degenerate")]
    RankDeficient { context: String, dim: usize },

    /// Nonlinear moment solver did not reach tolerance.
    #[error("solver failed in {context} after {iterations} iterations (residual {residual:.3e})")]
    Solver {
        context: String,
        iterations: usize,
        residual: f64,
    },

    #[error("ill-conditioned kernel system in {0}")]
    Conditioning(String),

    #[error("bootstrap unstable: {failed} of {total} replicates failed ({reason})")]
    BootstrapUnstable {
        failed: usize,
        total: usize,
        reason: String,
    },

    #[error("cross-fitting failed in fold {fold} for {role}: {source}")]
    Fold {
        fold: usize,
        role: String,
        #[source]
        source: Box<Error>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Schema(_) | Error::Config(_) => 2,
            Error::Domain(_) | Error::EmptyData(_) | Error::Dimension(_) => 3,
            Error::Precondition(_)
            | Error::RankDeficient { .. }
            | Error::Solver { .. }
            | Error::Conditioning(_)
            | Error::BootstrapUnstable { .. }
            | Error::Fold { .. } => 4,
            Error::Io(_) | Error::Csv(_) | Error::Json(_) => 5,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::Schema(_) => "schema",
            Error::Domain(_) => "domain",
            Error::EmptyData(_) => "empty_data",
            Error::Dimension(_) => "dimension",
            Error::Precondition(_) => "precondition",
            Error::RankDeficient { .. } => "rank_deficient",
            Error::Solver { .. } => "solver",
            Error::Conditioning(_) => "conditioning",
            Error::BootstrapUnstable { .. } => "bootstrap_unstable",
            Error::Fold { .. } => "fold",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}
