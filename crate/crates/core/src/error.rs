use alloc::string::String;
use alloc::vec::Vec;

/// Errors produced by the core engine.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// An invalid setting: grid spec, neighbor count, schedule, layer widths.
    #[error("configuration error: {0}")]
    Config(String),
    /// Input data that cannot be processed, e.g. non-finite coordinates.
    #[error("data error: {0}")]
    Data(String),
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A structural invariant was broken, e.g. a destination node without
    /// incoming edges. Indicates a bug in the caller.
    #[error("invariant violation: {0}")]
    Invariant(String),
    #[error("training error at epoch {epoch}: {detail}")]
    Training { epoch: usize, detail: String },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}
