use std::fmt;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("format error{}: {message}", RecordSuffix(*record))]
    Format {
        record: Option<usize>,
        message: String,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("training aborted at epoch {epoch}, batch {batch}: {message}")]
    Diverged {
        epoch: usize,
        batch: usize,
        message: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

struct RecordSuffix(Option<usize>);

impl fmt::Display for RecordSuffix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Some(r) => write!(f, " at record {r}"),
            None => Ok(()),
        }
    }
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn format(record: Option<usize>, msg: impl Into<String>) -> Self {
        Error::Format {
            record,
            message: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
