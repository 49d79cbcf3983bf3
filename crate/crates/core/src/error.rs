use thiserror::Error;

pub type Result<T> = std::result::Result<T, LokiError>;

#[derive(Debug, Error)]
pub enum LokiError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("budget error: {0}")]
    Budget(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("degenerate calibration: {0}")]
    DegenerateCalibration(String),

    #[error("index error: index {index} out of range for {len} rows")]
    Index { index: usize, len: usize },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("layer {layer}, head {head}")]
    AtHead {
        layer: u32,
        head: u32,
        #[source]
        source: Box<LokiError>,
    },

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("i/o error")]
    Io(#[from] std::io::Error),
}

impl LokiError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        LokiError::Shape(msg.into())
    }

    pub(crate) fn budget(msg: impl Into<String>) -> Self {
        LokiError::Budget(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        LokiError::Domain(msg.into())
    }

    /// Tags an error with the (layer, head) it came from.
    pub fn at_head(self, layer: u32, head: u32) -> Self {
        LokiError::AtHead {
            layer,
            head,
            source: Box::new(self),
        }
    }

    /// Strips any (layer, head) tags.
    pub fn root(&self) -> &LokiError {
        match self {
            LokiError::AtHead { source, .. } => source.root(),
            other => other,
        }
    }
}

/// Malformed LKD1/LKP1 input. Every rejection class has its own variant.
#[derive(Debug, Error, PartialEq)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),

    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),

    #[error("invalid rotary stage code {0}")]
    InvalidRotaryStage(u8),

    #[error("zero-sized field `{0}`")]
    ZeroDimension(&'static str),

    #[error("truncated input while reading `{field}`")]
    Truncated { field: &'static str },

    #[error("{extra} trailing bytes after payload")]
    TrailingBytes { extra: usize },

    #[error("non-finite value in `{field}` at row {row}, col {col}")]
    NonFinite {
        field: &'static str,
        row: usize,
        col: usize,
    },
}
