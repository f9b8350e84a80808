use thiserror::Error;

/// Errors produced anywhere in the pipeline.
///
/// Variants map onto the command-line exit codes: validation-style errors
/// (shape, geometry, parity, structure, config, state, validation) exit 1,
/// [`Error::Format`] and [`Error::Io`] exit 2, numeric failures exit 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("parity error: kernel size {0} is even, center undefined")]
    Parity(usize),

    #[error("structure error: {0}")]
    Structure(String),

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("state error: {0}")]
    State(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("unsupported instance: {0}")]
    Unsupported(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn format(offset: usize, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Format { .. } | Error::Io(_) => 2,
            Error::Numeric(_) | Error::Degenerate(_) => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
