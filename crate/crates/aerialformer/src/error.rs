use thiserror::Error;

/// Errors surfaced by tensor ops, model wiring, and the data pipeline.
#[derive(Error, Debug)]
pub enum AfError {
    #[error("shape mismatch in {op}: left {left:?} vs right {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("geometry error in {op}: {msg}")]
    Geometry { op: &'static str, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("wiring error between {from} and {to}: {msg}")]
    Wiring {
        from: String,
        to: String,
        msg: String,
    },

    #[error("data error at {path}: {msg}")]
    Data { path: String, msg: String },

    #[error("training error: {0}")]
    Training(String),

    #[error("batch norm `{0}` used in inference mode before any statistics were recorded")]
    UninitializedStats(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, AfError>;
