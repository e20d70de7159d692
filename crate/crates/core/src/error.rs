use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed JSON at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("unknown emotion {value:?} in dialogue {dialogue}")]
    UnknownEmotion { value: String, dialogue: usize },

    #[error("dialogue {0} has no utterances")]
    EmptyDialogue(usize),

    #[error("{what} out of range: {value} > {limit}")]
    Range { what: &'static str, value: usize, limit: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("encoding failed: {0}")]
    Encoding(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite activation in {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Data problems (bad files, labels, shapes) as opposed to bad invocation.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::Config(_))
    }
}
