use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("field `{field}`: expected {expected} entries, found {found}")]
    Shape {
        field: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("field `{field}`: {reason}")]
    InvalidField { field: &'static str, reason: String },

    #[error("field `{field}` row {row}: entries sum to {sum:.17} instead of 1")]
    NotStochastic {
        field: &'static str,
        row: String,
        sum: f64,
    },

    #[error("state-action pair (s={state}, a={action}) has zero visit probability")]
    ZeroVisit { state: usize, action: usize },

    #[error("max |r(s,a,s')| = {r_max} exceeds 1; set reward_bound = \"scaled\" to accept it")]
    RewardBound { r_max: f64 },

    #[error("discount {0} outside [0, 1)")]
    Discount(f64),

    #[error("step size {0} outside (0, 1)")]
    StepSize(f64),

    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    #[error("Lyapunov equation residual {residual:.3e} exceeds {limit:.1e}")]
    LyapunovResidual { residual: f64, limit: f64 },

    #[error("sample complexity: {0}")]
    Complexity(String),

    #[error("trial {trial} step {step}: sandwich violated at index {index} by {amount:.3e}")]
    SandwichViolation {
        trial: usize,
        step: usize,
        index: usize,
        amount: f64,
    },

    #[error("unknown builtin MDP `{0}`")]
    UnknownBuiltin(String),

    #[error("{path}: {message}")]
    Parse { path: String, message: String },

    #[error("{path}: {message}")]
    Io { path: String, message: String },
}
