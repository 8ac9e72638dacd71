//! Error type shared by every module in the crate.

use thiserror::Error;

/// Errors produced by the quantization toolkit.
#[derive(Debug, Error)]
pub enum LsiError {
    /// Operand shapes do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// A value lies outside the domain an operation accepts.
    #[error("domain error: {0}")]
    Domain(String),

    /// Inconsistent configuration (flags, model state vs. forward mode, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed file or record.
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    /// Calibration loss blew up.
    #[error("training diverged in layer {layer} at epoch {epoch}: loss {loss} exceeds 10x initial {initial}")]
    Divergence {
        layer: usize,
        epoch: usize,
        loss: f64,
        initial: f64,
        trace: Vec<f64>,
    },

    /// A gradient came back NaN or infinite.
    #[error("non-finite gradient for parameter `{param}` in layer {layer}")]
    NonFiniteGradient { layer: usize, param: String },

    /// An error raised while processing a specific layer.
    #[error("layer {layer}: {source}")]
    InLayer {
        layer: usize,
        #[source]
        source: Box<LsiError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl LsiError {
    pub fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        LsiError::Parse {
            location: location.into(),
            message: message.into(),
        }
    }

    /// Attach a layer index, leaving already-tagged errors alone.
    pub fn in_layer(self, layer: usize) -> Self {
        match self {
            e @ (LsiError::InLayer { .. }
            | LsiError::Divergence { .. }
            | LsiError::NonFiniteGradient { .. }) => e,
            other => LsiError::InLayer {
                layer,
                source: Box::new(other),
            },
        }
    }

    /// The innermost error, with layer tags stripped.
    pub fn root(&self) -> &LsiError {
        match self {
            LsiError::InLayer { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, LsiError>;
