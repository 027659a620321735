//! In-memory debias trial: synthesize a population, build a family-disjoint
//! split, train in one mode, then measure per-race test accuracy and how much
//! race information a linear probe can read from the frozen embeddings.

use serde::{Deserialize, Serialize};

use crate::error::TrainError;
use crate::fairmetrics::{self, FairnessReport, TrainLogRecord};
use crate::manifest::{self, SplitManifest};
use crate::modelcore::{Model, ModelConfig, TrainMode, RACE_CLASSES};
use crate::seed;
use crate::synthgen::{self, Population, SynthConfig};
use crate::trainer::{self, eval, TrainConfig, TrainData};

pub const PROBE_RIDGE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrialConfig {
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ratios: [f64; 3],
    pub neg_per_pos: usize,
}

impl Default for TrialConfig {
    fn default() -> Self {
        TrialConfig {
            synth: SynthConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            ratios: manifest::DEFAULT_SPLIT_RATIOS,
            neg_per_pos: 1,
        }
    }
}

impl TrialConfig {
    /// Same configuration with every random stream rooted at `root`.
    pub fn with_seed(mut self, root: u64) -> Self {
        self.synth.seed = seed::derive_seed(root, "synth");
        self.model.init_seed = seed::derive_seed(root, "model/init");
        self.train.seed = seed::derive_seed(root, "train");
        self
    }

    pub fn with_mode(mut self, mode: TrainMode) -> Self {
        self.train.mode = mode;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub mode: TrainMode,
    pub report: FairnessReport,
    /// Race-probe accuracy on test-split embeddings, fit on train-split embeddings.
    pub probe_accuracy: f64,
    pub log: Vec<TrainLogRecord>,
}

/// Population plus split, shared by both modes of a trial.
pub struct TrialData {
    pub population: Population,
    pub splits: SplitManifest,
}

pub fn prepare(cfg: &TrialConfig) -> Result<TrialData, TrainError> {
    let population = synthgen::make_population(&cfg.synth)?;
    let split_seed = seed::derive_seed(cfg.synth.seed, "split");
    let splits = manifest::build_split_manifest(
        &population.manifest,
        cfg.ratios,
        cfg.neg_per_pos,
        split_seed,
        manifest::DEFAULT_BALANCE_TOLERANCE,
    )?;
    Ok(TrialData { population, splits })
}

/// Linear race probe on frozen backbone embeddings.
pub fn race_probe(model: &Model, data: &TrialData) -> Result<f64, TrainError> {
    let images = &data.population.images;
    let fit = eval::image_embeddings(model, images, &data.splits.train)?;
    let score = eval::image_embeddings(model, images, &data.splits.test)?;
    let xs = |v: &[eval::ImageEmbedding]| v.iter().map(|r| r.e.clone()).collect::<Vec<_>>();
    let ys = |v: &[eval::ImageEmbedding]| v.iter().map(|r| r.race.index()).collect::<Vec<_>>();
    Ok(fairmetrics::linear_probe_accuracy(
        &xs(&fit),
        &ys(&fit),
        &xs(&score),
        &ys(&score),
        RACE_CLASSES,
        PROBE_RIDGE,
    )?)
}

pub fn run_trial(cfg: &TrialConfig, data: &TrialData) -> Result<TrialResult, TrainError> {
    let train_data = TrainData { images: &data.population.images, train: &data.splits.train, val: &data.splits.val };
    let outcome = trainer::train(cfg.model.clone(), &cfg.train, &train_data, |_| {})?;
    let report = eval::evaluate(&outcome.model, &data.population.images, &data.splits.val, &data.splits.test)?;
    let probe_accuracy = race_probe(&outcome.model, data)?;
    Ok(TrialResult { mode: cfg.train.mode, report, probe_accuracy, log: outcome.log })
}
