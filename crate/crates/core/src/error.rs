use std::path::PathBuf;

use thiserror::Error;
use trigait_tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("{0}")]
    Invalid(String),

    #[error("degenerate skeleton at frame {frame}: {msg}")]
    DegenerateFrame { frame: usize, msg: String },

    #[error("training diverged at iteration {iteration}: loss = {loss}")]
    Diverged { iteration: usize, loss: f64 },

    #[error("checkpoint config hash {checkpoint:016x} does not match run config hash {config:016x}")]
    ConfigMismatch { checkpoint: u64, config: u64 },

    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Error {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
