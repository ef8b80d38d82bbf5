use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("row {row} is fully masked; softmax has no valid distribution")]
    FullyMasked { row: usize },

    #[error("malformed matrix at byte offset {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("position overflow: position {position} exceeds configured maximum {max}")]
    PositionOverflow { position: usize, max: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors caused by the caller's inputs or configuration rather
    /// than by the environment.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Shape(_)
                | Error::Config(_)
                | Error::Schedule(_)
                | Error::FullyMasked { .. }
                | Error::Format { .. }
                | Error::PositionOverflow { .. }
                | Error::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
