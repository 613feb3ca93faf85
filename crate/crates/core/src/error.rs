use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the hallucination pipeline.
#[derive(Debug, Error)]
pub enum HalluxError {
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("shape mismatch at node {node} ({op}): {detail}")]
    ShapeMismatch {
        node: String,
        op: &'static str,
        detail: String,
    },

    #[error("unbound placeholder `{0}`")]
    UnboundPlaceholder(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("duplicate parameter `{0}`")]
    DuplicateParameter(String),

    #[error("loss node must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("duplicate sample id `{0}`")]
    DuplicateSampleId(String),

    #[error("missing files: {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    MissingFiles(Vec<PathBuf>),

    #[error("invalid split: {0}")]
    Split(String),

    #[error("sample id `{0}` not in feature cache")]
    MissingCacheEntry(String),

    #[error("stale feature cache: built by {cached}, expected {expected}")]
    StaleCache { cached: String, expected: String },

    #[error("samples missing modality `{modality}`: {}", .ids.join(", "))]
    MissingModality { modality: String, ids: Vec<String> },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<HalluxError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl HalluxError {
    pub fn in_stage(self, stage: &'static str) -> Self {
        HalluxError::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = HalluxError> = std::result::Result<T, E>;
