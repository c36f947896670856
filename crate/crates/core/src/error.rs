use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot parse chord token `{0}`")]
    ChordParse(String),

    #[error("cannot parse key `{0}`")]
    KeyParse(String),

    #[error("token id {0} is outside the vocabulary")]
    TokenOutOfRange(usize),

    #[error("pitch {0} is outside the MIDI range 0..=127")]
    PitchOutOfRange(i32),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("schema violation in field `{field}`{}: {reason}", index.map(|i| format!(" at index {i}")).unwrap_or_default())]
    Schema {
        field: String,
        index: Option<usize>,
        reason: String,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn schema(field: &str, index: Option<usize>, reason: impl Into<String>) -> Self {
        Error::Schema {
            field: field.to_string(),
            index,
            reason: reason.into(),
        }
    }
}
