use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("argument {value} outside the domain [{lo}, {hi}]")]
    Domain { value: f64, lo: f64, hi: f64 },
    #[error("degenerate link: {0}")]
    DegenerateLink(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("invalid link: {0}")]
    InvalidLink(String),
    #[error("basis already spans all {0} dimensions")]
    FullBasis(usize),
    #[error("combined vector has norm {0} > 1")]
    BallViolation(f64),
    #[error("theta_star has norm {0}, expected 1")]
    NonUnitTheta(f64),
    #[error("action norm {0} exceeds 1")]
    ActionOutsideBall(f64),
    #[error("link parity does not match: {0}")]
    ParityMismatch(String),
    #[error("query budget of {0} exhausted")]
    BudgetExhausted(u64),
    #[error("solver failure: {0}")]
    SolverFailure(String),
    #[error("no member of the confidence set found after {0} restarts")]
    EmptyConfidenceSet(usize),
    #[error("divergent integrand at x = {0}")]
    DivergentIntegrand(f64),
    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("only {successes} of {total} runs succeeded")]
    InsufficientSuccess { successes: usize, total: usize },
    #[error("fit degenerate: {0}")]
    FitDegenerate(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(field: &str, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.to_string(),
            message: message.into(),
        }
    }
}
