use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("dimension N={0} not supported (need 5 <= N <= 16)")]
    Dimension(usize),
    #[error("synchronization undefined: 2 + beta*kappa^(2*/2) = {0} <= 0")]
    SynchronizationUndefined(f64),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("precondition |phi| <= W1/2, |psi| <= W2/2 violated at sample point ({0})")]
    HalfBubble(String),
    #[error("quadrature did not converge: estimate {estimate}, error bound {error}")]
    Quadrature { estimate: f64, error: f64 },
    #[error("Gram matrix ill-conditioned (cond = {0:.3e}); increase lambda")]
    IllConditioned(f64),
    #[error("linear solve failed: {0}")]
    LinearSolve(String),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("degree undefined: {0}")]
    Degree(String),
    #[error("no critical point found: {0}")]
    NoCriticalPoint(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
