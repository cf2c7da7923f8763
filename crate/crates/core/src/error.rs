use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An operation received inputs that violate its shape or argument contract.
    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    /// A forward operation produced NaN or infinity.
    #[error("numeric fault: {op} produced a non-finite value")]
    NonFinite { op: &'static str },

    /// Training produced a non-finite loss.
    #[error("non-finite loss at step {step} (task {task_id})")]
    Diverged { step: usize, task_id: String },

    /// Malformed binary container or dataset file.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },

    #[error("config error in [{section}]: {msg}")]
    Config { section: String, msg: String },

    #[error("{0}")]
    Invalid(String),

    /// Any other error raised while decoding the named file.
    #[error("{path}: {source}")]
    InFile { path: String, source: Box<Error> },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Attach the file being decoded, unless the error already names one.
    pub(crate) fn in_file(self, path: impl AsRef<std::path::Path>) -> Self {
        match self {
            e @ (Error::Io { .. } | Error::InFile { .. }) => e,
            e => Error::InFile { path: path.as_ref().display().to_string(), source: Box::new(e) },
        }
    }

    /// True for errors caused by floating-point blow-ups rather than bad input.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::InFile { source, .. } => source.is_numeric(),
            e => matches!(e, Error::NonFinite { .. } | Error::Diverged { .. }),
        }
    }
}
