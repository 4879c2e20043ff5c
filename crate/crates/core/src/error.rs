use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("parse error at byte offset {offset}: {msg}")]
    Parse { offset: usize, msg: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("value out of range at byte offset {offset}: {msg}")]
    Range { offset: usize, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("in layer `{layer}`: {source}")]
    Layer {
        layer: String,
        #[source]
        source: Box<Error>,
    },

    #[error("a benchmark is already running in this process")]
    BenchmarkBusy,
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by user configuration rather than runtime failure.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_) => true,
            Error::Layer { source, .. } => source.is_config(),
            _ => false,
        }
    }
}

pub(crate) trait LayerContext<T> {
    fn in_layer(self, layer: impl FnOnce() -> String) -> Result<T>;
}

impl<T> LayerContext<T> for Result<T> {
    fn in_layer(self, layer: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|e| match e {
            // keep the innermost name only
            e @ Error::Layer { .. } => e,
            e => Error::Layer {
                layer: layer(),
                source: Box::new(e),
            },
        })
    }
}
