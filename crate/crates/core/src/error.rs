use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation failed{}: {}", .line.map(|l| format!(" at line {l}")).unwrap_or_default(), .violations.join("; "))]
    Validation {
        line: Option<usize>,
        violations: Vec<String>,
    },

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("optimizer error: {0}")]
    Optimizer(String),

    #[error("no convergence after {iterations} iterations (gradient max-norm {grad_norm:e}); trace: {trace}")]
    NonConvergence {
        iterations: usize,
        grad_norm: f64,
        trace: String,
    },

    #[error("non-finite weight for subject {id}: {detail}")]
    NonFiniteWeight { id: u64, detail: String },

    #[error("non-finite likelihood term for subject {id}: {detail}")]
    Evaluation { id: u64, detail: String },

    #[error("sampler diagnostics: {0}")]
    Diagnostics(String),

    #[error("{estimator}: {failures} of {attempted} replicates failed (last error: {last})")]
    TooManyFailures {
        estimator: String,
        failures: usize,
        attempted: usize,
        last: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Domain(_)
            | Error::Input(_)
            | Error::Config(_)
            | Error::Parse { .. }
            | Error::Validation { .. }
            | Error::Parameter(_)
            | Error::Io(_)
            | Error::Json(_) => 2,
            Error::DegenerateFit(_)
            | Error::Optimizer(_)
            | Error::NonConvergence { .. }
            | Error::NonFiniteWeight { .. }
            | Error::Evaluation { .. }
            | Error::Diagnostics(_)
            | Error::TooManyFailures { .. } => 3,
        }
    }

    /// Short machine-readable tag.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::Parameter(_) => "parameter",
            Error::Input(_) => "input",
            Error::Config(_) => "config",
            Error::Parse { .. } => "parse",
            Error::Validation { .. } => "validation",
            Error::DegenerateFit(_) => "degenerate_fit",
            Error::Optimizer(_) => "optimizer",
            Error::NonConvergence { .. } => "non_convergence",
            Error::NonFiniteWeight { .. } => "non_finite_weight",
            Error::Evaluation { .. } => "evaluation",
            Error::Diagnostics(_) => "diagnostics",
            Error::TooManyFailures { .. } => "too_many_failures",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
