use thiserror::Error;

/// Errors raised across the library.
///
/// The CLI maps each variant family onto a distinct exit code, see
/// [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error(
        "resource guard: {what} needs an estimated {required} bytes but the cap is {cap} bytes"
    )]
    MemoryCap {
        what: String,
        required: u128,
        cap: u128,
    },

    #[error("resource guard: {0}")]
    ResourceLimit(String),

    #[error("invalid exponent measure: {0}")]
    ModelValidity(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("fit failed to initialise: {0}")]
    Initialization(String),

    #[error("parse error at line {line}, key `{key}`: {message}")]
    Parse {
        key: String,
        line: usize,
        message: String,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parse { .. } => 2,
            Error::MemoryCap { .. } | Error::ResourceLimit(_) => 3,
            Error::Numerical(_) | Error::ModelValidity(_) | Error::Initialization(_) => 4,
            Error::Domain(_) => 5,
            Error::Io(_) | Error::Csv(_) | Error::Json(_) => 6,
        }
    }
}
