use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("weight function is singular at u = {u} (power exponential, lambda = {lambda})")]
    SingularWeight { u: f64, lambda: f64 },

    #[error("scatter matrix of observation {index} is not positive definite")]
    NotPositiveDefinite { index: usize },

    #[error("matrix is not positive definite")]
    Cholesky,

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("fit failed: {0}")]
    Fit(String),

    #[error("degenerate adjustment: {0}")]
    Degenerate(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("simulation failed: {0}")]
    Simulation(String),

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn at(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
