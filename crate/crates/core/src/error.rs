use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("map is undefined on the singular line x = 0")]
    Singular,
    #[error("point {0} lies outside I = [-1/2, 1/2]")]
    Domain(f64),
    #[error("invalid model parameters: {0}")]
    Params(String),
    #[error("center is periodic: {0}")]
    Periodic(String),
    #[error("resolution floor: {0}")]
    Resolution(String),
    #[error("estimation failed: {0}")]
    Estimation(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("budget exhausted: {0}")]
    Budget(String),
    #[error("snapshot format: {0}")]
    Snapshot(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LabError>;
