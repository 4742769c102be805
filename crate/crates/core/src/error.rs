use std::fmt;

/// Tensor axis named in dimension errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Batch,
    Channel,
    Height,
    Width,
    /// Flattened feature axis of a dense layer.
    Feature,
    /// Element count of a flat buffer.
    Length,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Axis::Batch => "batch",
            Axis::Channel => "channel",
            Axis::Height => "height",
            Axis::Width => "width",
            Axis::Feature => "feature",
            Axis::Length => "length",
        };
        f.write_str(name)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: dimension mismatch on {axis} axis (expected {expected}, found {found})")]
    Dimension {
        op: &'static str,
        axis: Axis,
        expected: usize,
        found: usize,
    },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("dropout rate {0} outside [0, 0.95]")]
    InvalidRate(f64),

    #[error("backward for {0} called without a recorded forward context")]
    MissingContext(&'static str),

    #[error("layer {index}: {source}")]
    Layer {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("graph has no dropout-site")]
    NoDropoutSite,

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("weight file: {0}")]
    WeightFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, axis: Axis, expected: usize, found: usize) -> Self {
        Error::Dimension {
            op,
            axis,
            expected,
            found,
        }
    }

    pub(crate) fn at_layer(self, index: usize) -> Self {
        Error::Layer {
            index,
            source: Box::new(self),
        }
    }

    /// Innermost error, stripping layer annotations.
    pub fn root(&self) -> &Error {
        match self {
            Error::Layer { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
