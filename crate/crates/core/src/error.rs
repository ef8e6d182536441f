use std::path::PathBuf;

/// Crate-wide error type. Library functions return this; the CLI maps it to
/// exit code 1 (clap handles usage errors with exit code 2).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("degenerate vector in {op}: norm {norm:e} <= epsilon {eps:e}")]
    Degenerate { op: &'static str, norm: f64, eps: f64 },

    #[error("backward requires a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    #[error("vocabulary is empty")]
    EmptyVocabulary,

    #[error("evaluation set is empty")]
    EmptyEvalSet,

    #[error("no training triples could be built from the event log")]
    NoTriples,

    #[error("duplicate {kind} id {id}")]
    DuplicateId { kind: &'static str, id: u64 },

    #[error("unknown {kind} id {id}")]
    UnknownId { kind: &'static str, id: u64 },

    #[error("{field} {value} outside valid range {range}")]
    OutOfRange {
        field: &'static str,
        value: f64,
        range: &'static str,
    },

    #[error("product {id} referenced by image modality has no image features")]
    MissingImage { id: u64 },

    #[error("{} products lack image features required by the modality: {}", ids.len(), fmt_ids(ids))]
    MissingImageFeatures { ids: Vec<u64> },

    #[error("strategy {strategy} requires {artifact}, which was not provided")]
    MissingArtifact {
        strategy: &'static str,
        artifact: &'static str,
    },

    #[error("invalid request: {msg}")]
    InvalidRequest { msg: String },

    #[error("invalid config: {msg}")]
    InvalidConfig { msg: String },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("malformed file {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("fingerprint mismatch: checkpoint was trained against vocabulary {expected}, got {got}")]
    FingerprintMismatch { expected: String, got: String },

    #[error("training diverged at epoch {epoch} (non-finite loss)")]
    Diverged { epoch: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

fn fmt_ids(ids: &[u64]) -> String {
    let shown: Vec<String> = ids.iter().take(8).map(|id| id.to_string()).collect();
    if ids.len() > 8 {
        format!("{}, ...", shown.join(", "))
    } else {
        shown.join(", ")
    }
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::Shape {
            op,
            expected: expected.into(),
            got: got.into(),
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}
