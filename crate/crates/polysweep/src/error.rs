use thiserror::Error;

/// Errors raised by the numerical and geometric routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    Dimension {
        expected: usize,
        got: usize,
        context: &'static str,
    },
    #[error("point violates constraint {index}: <x*_{index}, x> - c_{index} = {excess:e}")]
    Infeasible { index: usize, excess: f64 },
    #[error("polyhedron is empty")]
    EmptyPolyhedron,
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("constraint qualification fails: {0}")]
    ConstraintQualification(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("budget exceeded: {needed} evaluations requested, budget {budget}")]
    Budget { needed: u128, budget: u128 },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, got: usize, context: &'static str) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension {
            expected,
            got,
            context,
        })
    }
}
