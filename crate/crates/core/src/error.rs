use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("label out of range: {label} (num_classes = {num_classes})")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("no supervised pixels")]
    NoSupervisedPixels,

    #[error("empty manifest")]
    EmptyManifest,

    #[error("manifest file not found: {0}")]
    ManifestMissing(PathBuf),

    #[error("malformed manifest row {line}: {reason}")]
    MalformedRow { line: usize, reason: String },

    #[error("unresolvable path in manifest row {line}: {path}")]
    UnresolvablePath { line: usize, path: PathBuf },

    #[error("target-domain label reached a training loss")]
    TaintViolation,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("run directory {0} already holds a completed run (pass --force to overwrite)")]
    RunExists(PathBuf),

    #[error("training diverged at iteration {iter}: {reason}")]
    Diverged { iter: usize, reason: String },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
