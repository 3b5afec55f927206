use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("model error: {0}")]
    Model(String),

    #[error("simulation error: {0}")]
    Simulation(String),

    #[error("energy accounting error: {0}")]
    Accounting(String),

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("infeasible placement: {0}")]
    Infeasible(String),

    #[error("comparison error: {0}")]
    Comparison(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub(crate) fn param_err(msg: impl Into<String>) -> Error {
    Error::Parameter(msg.into())
}
