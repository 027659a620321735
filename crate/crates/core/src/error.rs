use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("contrastive loss needs at least 2 pairs per batch, got {0}")]
    TooFewPairs(usize),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite loss (fairness {l_fair}, race {l_race})")]
    NonFinite { l_fair: f64, l_race: f64 },
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("consensus needs exactly 3 votes, got {0}")]
    VoteCount(usize),
    #[error("duplicate identity ids across sources: {}", .0.join(", "))]
    DuplicateIdentities(Vec<String>),
    #[error("identity {0} has neither a race nor annotator votes")]
    MissingRace(String),
    #[error("identity {0} has no images")]
    NoImages(String),
    #[error("identity {0} lists image {1} more than once")]
    DuplicateImage(String, String),
    #[error("split ratios must be positive and sum to 1, got {0:?}")]
    BadRatios([f64; 3]),
    #[error("{families} families cannot fill {splits} splits")]
    TooFewFamilies { families: usize, splits: usize },
    #[error("cap must be at least 1")]
    BadCap,
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input shape {got:?} does not match expected {expected:?}")]
    Shape { got: Vec<usize>, expected: Vec<usize> },
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("invalid model configuration: {0}")]
    Config(String),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("not a checkpoint: {0}")]
    Format(String),
    #[error("parameter {name}: {message}")]
    Param { name: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Error)]
pub enum TrainError {
    #[error("non-finite loss at iteration {iteration}")]
    NonFinite {
        iteration: u64,
        /// Parameters from the last iteration with a finite loss.
        last_good: Box<crate::modelcore::Model>,
    },
    #[error("no training positives")]
    EmptyTrainingSet,
    #[error("image {0} not found in image store")]
    MissingImage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
}

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("threshold selection needs both kin and non-kin pairs")]
    SingleClass,
    #[error("no pairs to evaluate")]
    Empty,
    #[error("length mismatch: {0}")]
    Length(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// The non-finite variant carries a whole model; keep debug output readable.
impl std::fmt::Debug for TrainError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "TrainError({self})")
    }
}
