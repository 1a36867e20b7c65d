//! Error types shared across the workbench.

use thiserror::Error;

/// Errors produced by the engine, the stores, and the analysis passes.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor/layer dimension mismatch. `layer` names the graph node when the
    /// failure happened inside a model forward or backward pass.
    #[error("dimension error{}: {message}", .layer.as_ref().map(|l| format!(" in layer `{l}`")).unwrap_or_default())]
    Shape {
        layer: Option<String>,
        message: String,
    },

    /// Invalid argument, configuration, or state.
    #[error("validation error: {0}")]
    Validation(String),

    /// A persisted blob does not match its recorded checksum.
    #[error("checksum mismatch: recorded {recorded}, computed {computed}")]
    ChecksumMismatch { recorded: String, computed: String },

    /// A persisted format version is not supported by this build.
    #[error("format version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u32 },

    /// A binary blob is shorter than its manifest requires.
    #[error("truncated blob: manifest requires {expected} bytes, file has {found}")]
    TruncatedBlob { expected: u64, found: u64 },

    /// Manifest descriptors do not tile the blob they describe.
    #[error("blob size mismatch: {0}")]
    SizeMismatch(String),

    /// Training aborted because the loss became non-finite.
    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    Divergence { epoch: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(message: impl Into<String>) -> Self {
        Error::Shape {
            layer: None,
            message: message.into(),
        }
    }

    pub(crate) fn validation(message: impl Into<String>) -> Self {
        Error::Validation(message.into())
    }

    /// Attach a layer id to a bare shape error.
    pub(crate) fn in_layer(self, id: &str) -> Self {
        match self {
            Error::Shape {
                layer: None,
                message,
            } => Error::Shape {
                layer: Some(id.to_string()),
                message,
            },
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_error_names_layer() {
        let err = Error::shape("kernel wants 3 channels, input has 2").in_layer("conv1");
        let msg = err.to_string();
        assert!(msg.contains("conv1"), "{msg}");
        assert!(msg.contains("3 channels"), "{msg}");
    }

    #[test]
    fn in_layer_leaves_other_variants_alone() {
        let err = Error::validation("bad").in_layer("conv1");
        assert!(matches!(err, Error::Validation(_)));
    }
}
