use std::path::PathBuf;

use crate::variety::RiceVariety;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dataset layout error: {0}")]
    Layout(String),

    #[error("missing class directories: {}", names(.0))]
    MissingClasses(Vec<RiceVariety>),

    #[error("unexpected directory in dataset root: {0}")]
    UnexpectedDirectory(PathBuf),

    #[error("cannot decode image {path}: {source}")]
    Decode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("cannot encode image {path}: {source}")]
    Encode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("image {path} is {height}x{width}, below the 32x32 minimum")]
    ImageTooSmall {
        path: PathBuf,
        height: u32,
        width: u32,
    },

    #[error("unpaired file {0}: no same-name counterpart in images/ or masks/")]
    Unpaired(PathBuf),

    #[error("shape mismatch{}: expected {expected:?} (HxW), found {found:?}", context(.what))]
    ShapeMismatch {
        what: String,
        expected: (u32, u32),
        found: (u32, u32),
    },

    #[error("class {class} has {found} samples, at least {required} needed")]
    InsufficientSamples {
        class: RiceVariety,
        found: usize,
        required: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(
        "cannot place grain {placed} of {requested} without overlap after {attempts} attempts"
    )]
    Capacity {
        placed: usize,
        requested: usize,
        attempts: usize,
    },

    #[error("training diverged: non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    Divergence {
        epoch: usize,
        batch: usize,
        loss: f64,
    },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("unknown variety name {0:?}")]
    UnknownVariety(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(what: impl Into<String>, expected: (u32, u32), found: (u32, u32)) -> Self {
        Error::ShapeMismatch {
            what: what.into(),
            expected,
            found,
        }
    }

    /// True for errors caused by input data rather than configuration or I/O.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::InvalidConfig(_) | Error::Divergence { .. })
    }
}

fn names(v: &[RiceVariety]) -> String {
    v.iter().map(|c| c.name()).collect::<Vec<_>>().join(", ")
}

fn context(what: &str) -> String {
    if what.is_empty() {
        String::new()
    } else {
        format!(" ({what})")
    }
}
