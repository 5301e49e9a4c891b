use thiserror::Error;

/// Errors raised by the simulation and estimation routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("sampler stalled: no proposal accepted during {window} consecutive sweeps")]
    SamplerStall { window: usize },

    #[error("ambiguous winding at step {step}, site {site}: increment {increment} has magnitude >= {limit}")]
    AmbiguousWinding {
        step: usize,
        site: usize,
        increment: f64,
        limit: f64,
    },

    #[error("matrix is not positive semidefinite (min eigenvalue {min_eigenvalue:e}, tolerance {tolerance:e})")]
    NotPsd { min_eigenvalue: f64, tolerance: f64 },

    #[error("smoothing budget exhausted: entry row {row} reached distance {distance} >= {target} at cutoff {cutoff}")]
    SmoothingBudget {
        row: usize,
        distance: f64,
        target: f64,
        cutoff: u32,
    },

    #[error("truncation infeasible at eps = {eps}: sqrt(eps) * K' * M = {value} > 1 already at N = 1")]
    TruncationInfeasible { eps: f64, value: f64 },

    #[error("time step {dt} is too coarse for eps = {eps}; at most {max} is allowed")]
    Resolution { dt: f64, eps: f64, max: f64 },

    #[error("factor block is ill-conditioned (condition number {condition:e})")]
    IllConditioned { condition: f64 },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
