//! Fairness-aware kinship verification.
//!
//! The crate covers the whole desk-scale pipeline: building a race-labelled,
//! family-disjoint pair manifest ([`manifest`]), generating a synthetic
//! race-imbalanced population ([`synthgen`]), the model with CBAM and
//! cross-image attention ([`modelcore`]), the fair contrastive and race losses
//! ([`losses`]), training in multi-task or adversarial mode ([`trainer`]),
//! fairness metrics ([`fairmetrics`]) and a staged, hash-checked pipeline
//! ([`pipeline`]) behind the `kinfair` binary.

pub mod autograd;
pub mod error;
pub mod experiment;
pub mod fairmetrics;
pub mod losses;
pub mod manifest;
pub mod modelcore;
pub mod pipeline;
pub mod seed;
pub mod synthgen;
pub mod tensor;
pub mod trainer;

pub use error::{CheckpointError, ConfigError, LossError, ManifestError, MetricError, ModelError, TrainError};
pub use tensor::Tensor;
