use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("terminal LMI infeasible (most violated block p={p}, min eigenvalue {min_eig:.3e}); (A, B, M, P) does not admit a terminal law")]
    LmiInfeasible { p: usize, min_eig: f64 },

    #[error("loss realization violates the consecutive-loss bound P={bound}: counter would reach {counter}")]
    LossBoundViolated { bound: usize, counter: usize },

    #[error("min-max problem infeasible: {0}")]
    Infeasible(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
