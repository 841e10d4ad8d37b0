use crate::expr::{EvalError, ParseError};
use crate::jet::JetError;

/// Library-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum GeomError {
    #[error(transparent)]
    Jet(#[from] JetError),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("in component `{name}`: {source}")]
    Component {
        name: String,
        #[source]
        source: EvalError,
    },
    #[error("vector field lies outside the projector image (residual {residual:.3e})")]
    NotInSubmodule { residual: f64 },
    #[error("projector family is not a direct-sum decomposition: {detail}")]
    NotDecomposition { detail: String },
    #[error("singular or ill-conditioned matrix (condition estimate {cond:.3e})")]
    SingularMatrix { cond: f64 },
    #[error("order {order} too low: {needed} requires order >= {min}")]
    OrderTooLow {
        order: usize,
        needed: &'static str,
        min: usize,
    },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, GeomError>;
