use std::fmt;
use std::io;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced anywhere in the library. Exit-code mapping for the CLI
/// lives in [`Error::exit_code`]: 1 usage, 2 data/format, 3 numeric.
#[derive(Debug)]
pub enum Error {
    ShapeMismatch { op: &'static str, detail: String },
    NumericError { context: String },
    GraphError { detail: String },
    IndexError { index: usize, bound: usize },
    MaskError { detail: String },
    VariantMismatch { detail: String },
    DegenerateVector { norm: f64 },
    EmptyCorpus,
    InvalidParams { detail: String },
    TooFewSamples { n: usize, min: usize },
    Io { context: String, source: io::Error },
    FormatError { detail: String },
    ConfigMismatch { detail: String },
    InvalidStep { step: usize, total: usize },
    InvalidConfig { detail: String },
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch { op, detail: detail.into() }
    }

    pub fn numeric(context: impl Into<String>) -> Self {
        Error::NumericError { context: context.into() }
    }

    pub fn io(context: impl Into<String>, source: io::Error) -> Self {
        Error::Io { context: context.into(), source }
    }

    pub fn format(detail: impl Into<String>) -> Self {
        Error::FormatError { detail: detail.into() }
    }

    pub fn config(detail: impl Into<String>) -> Self {
        Error::InvalidConfig { detail: detail.into() }
    }

    /// CLI exit-code contract: 0 ok, 1 usage, 2 data/format, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig { .. } | Error::VariantMismatch { .. } => 1,
            Error::NumericError { .. } | Error::DegenerateVector { .. } => 3,
            _ => 2,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, detail } => write!(f, "shape mismatch in {op}: {detail}"),
            Error::NumericError { context } => write!(f, "non-finite value: {context}"),
            Error::GraphError { detail } => write!(f, "graph error: {detail}"),
            Error::IndexError { index, bound } => {
                write!(f, "index {index} out of range (bound {bound})")
            }
            Error::MaskError { detail } => write!(f, "mask error: {detail}"),
            Error::VariantMismatch { detail } => write!(f, "variant mismatch: {detail}"),
            Error::DegenerateVector { norm } => {
                write!(f, "degenerate vector: L2 norm {norm:e} below threshold")
            }
            Error::EmptyCorpus => write!(f, "corpus contains no tokens"),
            Error::InvalidParams { detail } => write!(f, "invalid parameters: {detail}"),
            Error::TooFewSamples { n, min } => {
                write!(f, "too few samples: {n} (minimum {min})")
            }
            Error::Io { context, source } => write!(f, "I/O error ({context}): {source}"),
            Error::FormatError { detail } => write!(f, "format error: {detail}"),
            Error::ConfigMismatch { detail } => write!(f, "config mismatch: {detail}"),
            Error::InvalidStep { step, total } => {
                write!(f, "schedule step {step} outside [0, {total}]")
            }
            Error::InvalidConfig { detail } => write!(f, "invalid config: {detail}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}
