//! Error type shared across the pipeline.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// A workload record did not match the JSON Lines schema.
    #[error("schema violation at line {line}: {message}")]
    Schema { line: usize, message: String },

    #[error("duplicate query_id {id:?} at line {line}")]
    DuplicateQueryId { id: String, line: usize },

    #[error("workload is empty")]
    EmptyWorkload,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// Operators form a closed vocabulary; an unseen one is a hard error.
    #[error("operator {0:?} not present in the operator vocabulary")]
    UnknownOperator(String),

    #[error("join node {0:?} does not have exactly two children")]
    JoinArity(String),

    #[error("leaf node {0:?} has no table")]
    LeafWithoutTable(String),

    #[error("embedding corpus is empty after min_count filtering")]
    EmptyCorpus,

    #[error("sample of {got} nodes exceeds the node limit N={limit}")]
    SampleTooLarge { got: usize, limit: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("degenerate targets: {0}")]
    DegenerateTargets(String),

    #[error("model artifact error: {0}")]
    Artifact(String),

    #[error("artifact format version {found} not supported (expected major {expected})")]
    ArtifactVersion { found: u32, expected: u32 },

    #[error("artifact checksum mismatch (corrupt or truncated file)")]
    ArtifactChecksum,
}

pub type Result<T> = std::result::Result<T, Error>;
