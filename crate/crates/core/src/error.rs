use thiserror::Error;

/// Errors raised anywhere in the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("optimizer error: non-finite gradient in parameter `{param}` at index {index}")]
    Optimizer { param: String, index: usize },
    #[error("estimation error: {0}")]
    Estimation(String),
    #[error("training aborted at step {step}: {reason}")]
    Training { step: usize, reason: String },
    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("schema error at line {line}: {detail}")]
    Schema { line: usize, detail: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("metric undefined: {0}")]
    Undefined(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
