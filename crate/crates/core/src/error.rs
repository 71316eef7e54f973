use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("no teacher cache entry for utterance `{0}`")]
    MissingTeacher(String),
    #[error("training diverged at epoch {epoch} ({detail}); last good epoch {last_good:?}")]
    Diverged {
        epoch: usize,
        last_good: Option<usize>,
        detail: String,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
