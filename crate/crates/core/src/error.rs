//! Error types shared across the framework.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    // --- prompts / vocabulary ---
    #[error("unknown token `{0}` (not in vocabulary)")]
    UnknownToken(String),
    #[error("prompt does not match the grammar: {0}")]
    MalformedPrompt(String),
    #[error("vocabulary hash mismatch: model was built for {expected}, got {actual}")]
    VocabMismatch { expected: String, actual: String },

    // --- schedules / diffusion ---
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("timestep {t} out of range 0..={t_max}")]
    TimestepOutOfRange { t: usize, t_max: usize },
    #[error("invalid guidance scale {0}: must be finite and >= 0")]
    InvalidGuidanceScale(f64),
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch { context: String, expected: String, actual: String },

    // --- training ---
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),

    // --- adapters / composition ---
    #[error("adapter targets unknown layer `{0}`")]
    UnknownLayer(String),
    #[error("adapter/base mismatch: plugin was built for model {expected}, got {actual}")]
    BaseHashMismatch { expected: String, actual: String },
    #[error("adapter shape error at layer `{layer}`: {detail}")]
    AdapterShape { layer: String, detail: String },
    #[error("invalid merge job: {0}")]
    InvalidMergeJob(String),

    // --- archives ---
    #[error("archive error: {0}")]
    Archive(String),
    #[error("content hash mismatch: stored {expected}, recomputed {actual}")]
    HashMismatch { expected: String, actual: String },

    // --- metrics ---
    #[error("metric input error: {0}")]
    MetricInput(String),

    // --- registry ---
    #[error("plugin `{0}` is not registered")]
    NotRegistered(String),
    #[error("plugin `{id}` already registered by `{owner}`")]
    OwnerConflict { id: String, owner: String },
    #[error("request id `{0}` was already metered")]
    DuplicateRequest(String),
    #[error("registry corrupt: {0}")]
    RegistryCorrupt(String),

    // --- io / serialization ---
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, CoreError>;
