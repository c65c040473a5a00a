use std::path::PathBuf;

use crate::layout::RankId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    // tensor store
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("corrupt file: {0}")]
    CorruptFile(String),
    #[error("invalid tensor `{name}`: {reason}")]
    InvalidTensor { name: String, reason: String },
    #[error("duplicate tensor name `{0}`")]
    DuplicateTensor(String),

    // layout
    #[error("infeasible layout: {0}")]
    InfeasibleLayout(String),
    #[error("layer {layer} out of range (model has {num_layers} layers)")]
    UnknownLayer { layer: usize, num_layers: usize },
    #[error("expert {expert} out of range (model has {num_experts} routed experts)")]
    UnknownExpert { expert: usize, num_experts: usize },
    #[error("invalid layout plan: {0}")]
    InvalidPlan(String),

    // converter
    #[error("duplicate parameter `{name}` in layer group {layer:?}")]
    DuplicateParam { layer: Option<usize>, name: String },
    #[error("missing layer groups {missing:?}")]
    MissingLayer { missing: Vec<usize> },
    #[error("parameter `{0}` has no owning rank")]
    OrphanParam(String),
    #[error("checkpoint does not match plan: {0}")]
    ConfigMismatch(String),
    #[error("replicas of `{param}` diverge between ranks {first} and {second}")]
    ReplicaMismatch {
        param: String,
        first: RankId,
        second: RankId,
    },
    #[error("incomplete shard set: {0}")]
    IncompleteShardSet(String),
    #[error("unrecognised trainer parameter name `{0}`")]
    UnknownTrainerName(String),

    // simulator
    #[error("collective mismatch on group `{group}` at index {index}: tags {tags:?}")]
    CollectiveMismatch {
        group: String,
        index: usize,
        tags: Vec<String>,
    },
    #[error("invalid collective program: {0}")]
    InvalidProgram(String),

    // scheduler
    #[error("empty token sequence")]
    EmptySequence,
    #[error("invalid token NLL: {0}")]
    InvalidNll(String),
    #[error("unknown checkpoint tag `{0}`")]
    UnknownCheckpoint(String),
    #[error("metric for task `{task}` is {value}, expected a value in [0, 1]")]
    InvalidMetric { task: String, value: f64 },
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("invalid task weights: {0}")]
    InvalidWeights(String),
    #[error("invalid weighting config: {0}")]
    InvalidConfig(String),

    // metrics
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}
