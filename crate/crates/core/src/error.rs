use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum IvtError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("index {index} out of bounds (length {len}) in {op}")]
    Bounds {
        op: &'static str,
        index: usize,
        len: usize,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite value at component {index} ({context})")]
    Numeric { context: String, index: usize },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl IvtError {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        IvtError::Config(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        IvtError::Contract(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, IvtError>;

/// Parses a TOML document, reporting failures with the 1-based line of the
/// offending span.
pub fn parse_toml<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| {
        let line = e
            .span()
            .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
            .unwrap_or(0);
        IvtError::Parse {
            line,
            msg: e.message().to_string(),
        }
    })
}
