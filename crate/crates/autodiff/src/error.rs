use thiserror::Error;

pub type Result<T> = std::result::Result<T, AutodiffError>;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    /// `node` names the offending graph node, e.g. `#12 matmul 'gru.gates'`.
    #[error("shape mismatch at {node}: {detail}")]
    ShapeMismatch { node: String, detail: String },
    #[error("non-finite value produced at {node}")]
    NonFinite { node: String },
    #[error("index {index} out of range for {rows} rows at {node}")]
    IndexOutOfRange {
        node: String,
        index: usize,
        rows: usize,
    },
    #[error("input `{0}` is not bound")]
    UnboundInput(String),
    #[error("parameter `{0}` is not in the store")]
    UnknownParameter(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParameter(String),
    #[error("backward requested before forward")]
    NotEvaluated,
    #[error("seed shape {seed:?} does not match sink shape {sink:?}")]
    SeedShape { seed: Vec<usize>, sink: Vec<usize> },
    #[error("gradient check needs a scalar sink, got shape {0:?}")]
    NonScalarSink(Vec<usize>),
    #[error("gradient for `{0}` contains non-finite values")]
    NonFiniteGradient(String),
    #[error("gradient for `{name}` has shape {grad:?}, parameter has {param:?}")]
    GradientShape {
        name: String,
        grad: Vec<usize>,
        param: Vec<usize>,
    },
    #[error("invalid optimizer setting: {0}")]
    InvalidOptimizer(String),
    #[error("checkpoint line {line}: {detail}")]
    Checkpoint { line: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
