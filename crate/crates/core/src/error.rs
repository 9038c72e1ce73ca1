use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid convolution spec: {0}")]
    ConvSpec(String),

    #[error("degenerate statistics: {0}")]
    Degenerate(String),

    #[error("autograd: {0}")]
    Autograd(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("invalid value: {0}")]
    Value(String),

    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Divergence {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
