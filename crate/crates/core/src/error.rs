use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure carries the name of the subsystem that raised it so that the
/// command line can surface it verbatim.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("numerics: {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("numerics: {0}")]
    Numerics(String),

    #[error("nn: {0}")]
    Model(String),

    #[error("diffusion: {0}")]
    Diffusion(String),

    #[error("attribution: {0}")]
    Attribution(String),

    #[error("maskops: {0}")]
    Mask(String),

    #[error("pipeline: {0}")]
    Pipeline(String),

    #[error("datasynth: {0}")]
    Data(String),

    #[error("training: {0}")]
    Training(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("evalmetrics: {0}")]
    Eval(String),

    #[error("png: {path}: {detail}")]
    Png { path: PathBuf, detail: String },

    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
