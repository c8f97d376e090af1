use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of the function it was passed to.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("infeasible equilibrium: {0}")]
    InfeasibleEquilibrium(String),

    #[error("grid mismatch: expected {expected} nodes, got {got}")]
    GridMismatch { expected: usize, got: usize },

    #[error("assumption (c1 + c4) D < L violated: (c1 + c4) D = {lhs:.6} m, L = {length} m")]
    AssumptionViolated { lhs: f64, length: f64 },

    #[error("CFL condition violated: courant number {courant:.4} > 1 (speed {speed:.4} m/s, dt {dt} s, dx {dx} m)")]
    Cfl { courant: f64, speed: f64, dt: f64, dx: f64 },

    #[error("characteristic speeds outgrew the grid at t = {t:.2} s: courant number {courant:.4} > 1")]
    CflExceeded { t: f64, courant: f64 },

    #[error("delay {delay} s is not an integer multiple of the time step {dt} s")]
    DelayNotMultiple { delay: f64, dt: f64 },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("control history holds no sample for time index {index}")]
    HistoryUnavailable { index: i64 },

    #[error("successive approximations stalled after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("state left the feasible set at x = {x:.1} m, t = {t:.2} s: {detail}")]
    LeftFeasibleSet { x: f64, t: f64, detail: String },

    #[error("run diverged at t = {t:.2} s: norm {norm:e} exceeds {limit:e}")]
    Divergence { t: f64, norm: f64, limit: f64 },

    #[error("config parse error at line {line}: {message}")]
    ConfigParse { line: usize, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code for the command-line driver: 1 validation, 2 runtime
    /// divergence, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Divergence { .. }
            | Error::CflExceeded { .. }
            | Error::LeftFeasibleSet { .. }
            | Error::NonConvergence { .. } => 2,
            Error::Io { .. } | Error::Csv(_) => 3,
            _ => 1,
        }
    }
}
