use std::path::PathBuf;

/// Errors surfaced by the simulator.
///
/// `Contract` marks a violated operation precondition (bad shapes, invalid
/// distributions, out-of-range labels). `Config` marks an inconsistent or
/// infeasible run configuration. Both map to a nonzero CLI exit code.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("round {round}{}: {source}", device.map(|d| format!(", device {d}")).unwrap_or_default())]
    Round {
        round: usize,
        device: Option<usize>,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Attach round (and optionally device) context to a failure inside the
    /// server loop.
    pub fn in_round(self, round: usize, device: usize) -> Self {
        Error::Round {
            round,
            device: Some(device),
            source: Box::new(self),
        }
    }

    pub fn in_server_round(self, round: usize) -> Self {
        Error::Round {
            round,
            device: None,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
