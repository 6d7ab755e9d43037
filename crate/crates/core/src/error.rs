use thiserror::Error;

use crate::lcp::LcpStatus;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("problem of size {size} exceeds the enumeration limit of {limit}")]
    DimensionTooLarge { size: usize, limit: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("LCP solve failed with status {status:?}")]
    Lcp { status: LcpStatus },

    #[error("LCS step failed at state {x:?}, input {u:?}: {status:?}")]
    StepFailure {
        x: Vec<f64>,
        u: Vec<f64>,
        status: LcpStatus,
    },

    #[error("rollout failed at step {step}: {source}")]
    Rollout {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("non-finite value from model evaluator: {0}")]
    NonFinite(String),

    #[error("problem is infeasible")]
    Infeasible,

    #[error("iteration limit reached after {iterations} iterations (primal residual {primal_residual:.3e}, dual residual {dual_residual:.3e})")]
    MaxIters {
        iterations: usize,
        best: Vec<f64>,
        primal_residual: f64,
        dual_residual: f64,
    },

    #[error("big-M bound active within tolerance (M = {big_m}); increase M")]
    BigMViolated { big_m: f64 },

    #[error("branch-and-bound node limit {limit} reached (incumbent {incumbent:?}, gap {gap:.3e})")]
    NodeLimit {
        limit: usize,
        incumbent: Option<f64>,
        gap: f64,
    },

    #[error("bisection failed to bracket the quadratic constraint multiplier")]
    BisectionBracket,

    #[error("C3 iteration {iteration}, step {step:?}: {source}")]
    Solver {
        iteration: usize,
        step: Option<usize>,
        #[source]
        source: Box<Error>,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("closed loop failed at t = {time:.3} s: {source}")]
    ClosedLoop {
        time: f64,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
