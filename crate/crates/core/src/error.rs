use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("degenerate mask: {0}")]
    DegenerateMask(String),

    #[error("token alignment: student has {student} tokens, teacher has {teacher}")]
    Alignment { student: usize, teacher: usize },

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(&'static str),

    #[error("parameter `{name}`: {detail}")]
    Parameter { name: String, detail: String },

    #[error("parse error in {source_name} at {position}: {detail}")]
    Parse {
        source_name: String,
        position: String,
        detail: String,
    },

    #[error("bad file format: {0}")]
    Format(String),

    #[error("truncated input: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },

    #[error("missing teacher record for sample {0}")]
    MissingTeacher(u64),

    #[error("teacher record for sample {0} carries no logits")]
    MissingLogits(u64),

    #[error("label {label} out of range for {classes} classes")]
    Label { label: u32, classes: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by malformed or mismatched input data.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Format(_)
                | Error::Truncated { .. }
                | Error::MissingTeacher(_)
                | Error::MissingLogits(_)
                | Error::Label { .. }
                | Error::Parameter { .. }
                | Error::Io { .. }
                | Error::Json(_)
                | Error::Shape { .. }
                | Error::Alignment { .. }
                | Error::Degenerate(_)
                | Error::DegenerateMask(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
