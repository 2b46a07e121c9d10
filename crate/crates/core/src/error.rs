use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} values")]
    Length { shape: Vec<usize>, len: usize },
    #[error("unsupported rank {rank} (expected 1..=3 or a specific rank)")]
    Rank { rank: usize },
    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },
    #[error("invalid distribution parameters: {0}")]
    Distribution(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LayerError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("batch of {batch} is too small for batch-norm training (need at least 2)")]
    BatchTooSmall { batch: usize },
    #[error("dropout rate {0} outside [0, 1)")]
    DropoutRate(f64),
    #[error("sequence length {len} shorter than filter width {width}")]
    SequenceTooShort { len: usize, width: usize },
    #[error("invalid layer configuration: {0}")]
    Config(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sample {id}: feature shape {got:?} does not match expected {expected:?}")]
    SampleShape {
        id: String,
        got: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("{0} head is not allocated in this model")]
    MissingHead(&'static str),
    #[error("target shape {got:?} does not match expected {expected:?}")]
    TargetShape {
        got: Vec<usize>,
        expected: Vec<usize>,
    },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient in tensor `{0}`")]
    NonFiniteGradient(String),
    #[error("parameter/gradient mismatch: {0}")]
    Mismatch(String),
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("record {index}: {message}")]
    Record { index: usize, message: String },
    #[error("record {index} ({id}): feature shape {rows}x{cols} does not fit expected {expected}")]
    Shape {
        index: usize,
        id: String,
        rows: usize,
        cols: usize,
        expected: String,
    },
    #[error("record {index} ({id}): non-finite feature value")]
    NonFinite { index: usize, id: String },
    #[error("record {index}: unknown domain tag `{tag}`")]
    UnknownDomain { index: usize, tag: String },
    #[error("record {index} ({id}): {message}")]
    Labels {
        index: usize,
        id: String,
        message: String,
    },
    #[error(
        "balanced batches of {batch} need {per_domain} samples per domain, have {images} image and {texts} text"
    )]
    Unbalanced {
        batch: usize,
        per_domain: usize,
        images: usize,
        texts: usize,
    },
    #[error("invalid synthetic spec: field `{field}` {message}")]
    Spec { field: &'static str, message: String },
    #[error("invalid batch request: {0}")]
    Batch(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("embedding index: {0}")]
    Index(String),
    #[error("k = {k} exceeds the {available} candidate rows")]
    TooFewCandidates { k: usize, available: usize },
    #[error("need at least {need} rows, got {got}")]
    TooFewRows { need: usize, got: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    /// The state before the failing step is kept in `checkpoint`.
    #[error("non-finite {what} at step {step}; last good state is step {}", checkpoint.step)]
    NonFinite {
        step: u64,
        what: String,
        checkpoint: Box<crate::checkpoint::Checkpoint>,
    },
}
