use thiserror::Error;

/// Crate-wide error type.
///
/// Variants follow the failure classes of the public operations: `Domain`
/// for mathematically invalid inputs (nonpositive temperature, all-zero
/// weights), `Data` for structurally bad inputs (out-of-range ids, shape
/// mismatches), `Capacity` for instances too large to enumerate, and
/// `Config` for invalid run configuration.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("capacity error: {0}")]
    Capacity(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
