use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum BimError {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    /// Using graph state after it was released, or releasing out of order.
    #[error("lifecycle error: {0}")]
    Lifecycle(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("schedule error: {0}")]
    Schedule(String),

    /// A gradient crossed a block boundary. Indicates a bug in the engine.
    #[error("isolation fault: {0}")]
    Isolation(String),

    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("incompatible file: {0}")]
    Incompatible(String),

    #[error("resource error: {detail} (analytic estimate {estimate_bytes} bytes)")]
    Resource { detail: String, estimate_bytes: u64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, BimError>;

pub(crate) fn dim_err(op: &'static str, detail: impl Into<String>) -> BimError {
    BimError::Dimension {
        op,
        detail: detail.into(),
    }
}
