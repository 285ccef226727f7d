use std::fmt;

/// Crate-wide error type. Variants carry enough context to be actionable
/// from a CLI message without chasing source locations.
#[derive(Debug)]
pub enum Error {
    /// Tensor shape disagreement; names the operation and both shapes.
    Shape {
        op: &'static str,
        detail: String,
    },
    /// A forward op or gradient produced NaN/Inf.
    NonFinite {
        op: &'static str,
    },
    /// Optimizer contract violation (missing grad, bad hyperparameter).
    Optimizer(String),
    /// Learning-rate schedule misuse (step out of range, bad ratio).
    Schedule(String),
    /// Tokenizer / vocabulary construction failure.
    Vocab(String),
    /// Instruction record failed validation; all violations listed.
    Validation(Vec<String>),
    /// Instruction text had zero or multiple modality tokens.
    ModalityToken(String),
    /// A branch required by the modality tag is missing, or an extra one present.
    ModalityMismatch(String),
    /// Checkpoint file problems, each distinct per the on-disk contract.
    CheckpointFormat(String),
    CheckpointVersion {
        found: u8,
        supported: u8,
    },
    CheckpointConfigHash {
        expected: String,
        found: String,
    },
    CheckpointUnknownTensor(String),
    /// Dataset file problems with line numbers where applicable.
    Dataset(String),
    /// Generation-service transport failure after retries (retryable).
    ClientTransport(String),
    /// Generation response could not be parsed; carries the raw text.
    ClientParse {
        reason: String,
        raw: String,
    },
    /// Record rejected by the curation pipeline after retries.
    CurationRejected(String),
    /// Evaluation harness failure (missing predictions, too many unparseable judgments).
    Eval(String),
    /// Configuration violations; every problem reported, not just the first.
    Config(Vec<String>),
    Io(std::io::Error),
    Json(serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "shape mismatch in {op}: {detail}"),
            Error::NonFinite { op } => write!(f, "non-finite value produced by {op}"),
            Error::Optimizer(msg) => write!(f, "optimizer error: {msg}"),
            Error::Schedule(msg) => write!(f, "schedule error: {msg}"),
            Error::Vocab(msg) => write!(f, "vocabulary error: {msg}"),
            Error::Validation(violations) => {
                write!(f, "record validation failed: {}", violations.join("; "))
            }
            Error::ModalityToken(msg) => write!(f, "modality token error: {msg}"),
            Error::ModalityMismatch(msg) => write!(f, "modality mismatch: {msg}"),
            Error::CheckpointFormat(msg) => write!(f, "checkpoint format error: {msg}"),
            Error::CheckpointVersion { found, supported } => write!(
                f,
                "checkpoint version {found} not supported (max {supported})"
            ),
            Error::CheckpointConfigHash { expected, found } => write!(
                f,
                "checkpoint was written under config hash {found}, refusing to load into config hash {expected}"
            ),
            Error::CheckpointUnknownTensor(name) => {
                write!(f, "checkpoint contains unknown tensor {name:?}")
            }
            Error::Dataset(msg) => write!(f, "dataset error: {msg}"),
            Error::ClientTransport(msg) => write!(f, "generation client transport error: {msg}"),
            Error::ClientParse { reason, raw } => {
                write!(f, "unparseable generation response ({reason}): {raw:?}")
            }
            Error::CurationRejected(msg) => write!(f, "curation rejected: {msg}"),
            Error::Eval(msg) => write!(f, "evaluation error: {msg}"),
            Error::Config(violations) => {
                write!(f, "invalid config: {}", violations.join("; "))
            }
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Json(e) => write!(f, "json error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            Error::Json(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e)
    }
}
