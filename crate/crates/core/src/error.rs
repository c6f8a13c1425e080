use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: expected shape {expected:?}, got {got:?}")]
    Shape {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("empty spec: {0}")]
    EmptySpec(String),
    #[error("invalid {what}: {msg}")]
    Invalid { what: &'static str, msg: String },
    #[error("label mode mismatch: expected {expected}, got {got}")]
    LabelMode { expected: String, got: String },
    #[error("insufficient pairs: {0}")]
    InsufficientPairs(String),
    #[error("term `{0}` not present in loss log")]
    MissingTerm(String),
    #[error("non-finite loss term `{term}` at step {step}")]
    NonFinite { term: String, step: u64 },
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Tensor(#[from] tdbgan_autograd::TensorError),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(what: &'static str, msg: impl Into<String>) -> Error {
    Error::Invalid {
        what,
        msg: msg.into(),
    }
}

pub(crate) fn check_shape(op: &'static str, expected: &[usize], got: &[usize]) -> Result<()> {
    if expected != got {
        return Err(Error::Shape {
            op,
            expected: expected.to_vec(),
            got: got.to_vec(),
        });
    }
    Ok(())
}
