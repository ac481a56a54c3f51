use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by the editing pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A tensor or image had the wrong dimensions for the requested operation.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: String,
        got: String,
    },

    /// A configuration value violates a documented constraint.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// A numeric argument left its legal domain (non-positive depth, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Input data contained NaN or infinite entries.
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    /// A dataset could not supply what was asked of it.
    #[error("data error: {0}")]
    Data(String),

    /// All positive/negative latent differences were zero; no direction exists.
    #[error("degenerate attribute '{0}': positive and negative latents are identical")]
    DegenerateAttribute(String),

    /// Training produced a non-finite loss and was aborted.
    #[error("training aborted: {term} became non-finite at step {step}{dump}")]
    TrainingDiverged {
        term: &'static str,
        step: usize,
        dump: String,
    },

    /// Pivotal tuning loss grew past the divergence guard.
    #[error("pivotal tuning diverged: loss {loss} exceeds 10x initial loss {initial}")]
    PtiDiverged { loss: f64, initial: f64 },

    /// A checkpoint or direction file could not be parsed.
    #[error("malformed file {path}: {reason}")]
    Malformed { path: String, reason: String },

    /// Filesystem failure while reading or writing artifacts.
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Image decoding or encoding failure.
    #[error("image error on {path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn shape(context: &'static str, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::Shape {
            context,
            expected: expected.into(),
            got: got.into(),
        }
    }

    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
