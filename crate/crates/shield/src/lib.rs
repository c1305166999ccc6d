//! SHIELD: certifiably safe screening of constraints and decision variables
//! in ℓ1-regularized strongly convex quadratic programs, with a model
//! predictive control harness for multi-modal obstacle avoidance.
//!
//! The pipeline, per solve:
//!
//! 1. a *predictor* guesses which dual variables are active (constraint
//!    multipliers) or saturated (regularizer subgradients);
//! 2. the *dual engine* solves the correspondingly reduced unconstrained dual
//!    in closed form, lifts and projects the result, and converts the
//!    projected-gradient norm into a certified bound on the distance to the
//!    true dual optimum;
//! 3. the *screening* rules combine prediction and certificate to delete
//!    constraints and ℓ1-regularized coordinates whose removal is provably
//!    safe: the reduced solution still satisfies every original constraint;
//! 4. the *primal solver* solves the reduced program and embeds the solution
//!    back into the full coordinate space.
//!
//! Safety never depends on the predictor being right: a wrong guess inflates
//! the certificate, which blocks screening and degrades gracefully to the
//! full problem.

pub mod dual;
pub mod mpc;
pub mod predictor;
pub mod problem;
pub mod screening;
pub mod solver;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Inconsistent dimensions in user-supplied data.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A document failed to parse; line/column are 1-based (0 when unknown).
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    /// The (possibly reduced) problem admits no feasible point.
    #[error("infeasible problem: {0}")]
    Infeasible(String),

    /// An iterative method hit its iteration cap before reaching tolerance.
    #[error("iteration cap reached with residual {residual:.3e}")]
    IterationCap { residual: f64 },

    /// A layout disagrees with the program it is applied to.
    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),

    /// A point violated a feasibility precondition.
    #[error("infeasible point: {0}")]
    InfeasiblePoint(String),

    /// Numerical failure in a factorization or solver backend.
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub(crate) fn from_json(e: serde_json::Error) -> Self {
        Error::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        }
    }
}
