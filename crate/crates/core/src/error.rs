//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config parse error: {0}")]
    ConfigParse(String),

    #[error("unknown {field} identifier {id:?}; registered: {known:?}")]
    UnknownComponent {
        field: String,
        id: String,
        known: Vec<String>,
    },

    #[error("{context}: dimension mismatch, {left} vs {right}")]
    DimensionMismatch {
        context: String,
        left: usize,
        right: usize,
    },

    #[error("unknown component {0:?} in train policy")]
    PolicyUnknownComponent(String),

    #[error("trainable set is empty; refusing to train")]
    EmptyTrainableSet,

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest digest mismatch: model {model}, bundle {bundle}")]
    DigestMismatch { model: String, bundle: String },

    #[error("asset bundle missing parameter {0:?}")]
    MissingParameter(String),

    #[error("parameter {name}: shape mismatch, expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("malformed asset file: {0}")]
    BadAssetFile(String),

    #[error("vocabulary error: unknown symbol {0:?}")]
    Vocab(String),

    #[error("feature sequence is empty: {0}")]
    EmptyFeature(String),

    #[error("input too short: {len} frames, need at least {need}")]
    TooShort { len: usize, need: usize },

    #[error("undefined rate: reference is empty")]
    UndefinedRate,

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("output does not contain the target tag: {raw:?}")]
    SrtFormat { raw: String },

    #[error("biasing list needs {needed} distractors but only {available} rare words are available")]
    BiasingListSize { needed: usize, available: usize },

    #[error("prompt template for task {task:?} is missing field {field:?}")]
    TemplateField { task: String, field: String },

    #[error("retrieval k={k} exceeds datastore size {size}")]
    RetrievalBounds { k: usize, size: usize },

    #[error("LoRA adapters already attached at {0}")]
    DoubleAttach(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
