use thiserror::Error;

/// Errors surfaced by the solver library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("empty cell: no particles to operate on")]
    EmptyCell,

    #[error("domain error: {0}")]
    Domain(String),

    #[error("nonlinear solver did not converge: residual {residual:.3e} after {iters} iterations")]
    Convergence { residual: f64, iters: usize },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("particle at x = {x} left the domain [{lo}, {hi}]")]
    OutOfDomain { x: f64, lo: f64, hi: f64 },

    #[error("config error at `{path}`: {msg}")]
    Config { path: String, msg: String },

    #[error("cell {cell} failed at step {step}: {source}")]
    Cell {
        cell: usize,
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
