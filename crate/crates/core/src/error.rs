//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on a named input was violated.
    #[error("domain error on `{field}`: {message}")]
    Domain { field: &'static str, message: String },

    /// Configuration file could not be parsed or failed validation.
    #[error("config error: {0}")]
    Config(String),

    /// The PDE stepper failed (non-convergence, positivity loss, ...).
    #[error("solver failure at t={t:.6e}{}: {message}", node_suffix(*node))]
    Solver {
        t: f64,
        node: Option<[usize; 2]>,
        message: String,
    },

    /// The terminal-layer fixed point did not contract.
    #[error("fixed-point failure: {0}")]
    Contraction(String),

    /// Interpolation was requested outside the solved region.
    #[error("point (t={t:.6e}, y=({y0:.4e}, {y1:.4e})) outside solved region: {message}")]
    OutOfDomain {
        t: f64,
        y0: f64,
        y1: f64,
        message: String,
    },

    /// A statistical verification failed (sandwich, saddle, rates, ...).
    #[error("verification failure: {0}")]
    Verification(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

fn node_suffix(node: Option<[usize; 2]>) -> String {
    match node {
        Some([i, j]) => format!(", node ({i}, {j})"),
        None => String::new(),
    }
}

impl Error {
    pub fn domain(field: &'static str, message: impl Into<String>) -> Self {
        Error::Domain {
            field,
            message: message.into(),
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
