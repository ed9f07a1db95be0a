use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("leaf `{0}` is not bound")]
    UnboundLeaf(String),
    #[error("loss node {node} is not scalar (shape {shape:?})")]
    NonScalarLoss { node: usize, shape: Vec<usize> },
    #[error("tensor shape {shape:?} does not hold {len} elements")]
    BadTensor { shape: Vec<usize>, len: usize },
    #[error("degenerate 6D rotation code at node {node}")]
    DegenerateRotation { node: usize },
}
