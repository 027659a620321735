//! Staged pipeline behind the `kinfair` binary.
//!
//! Stages run in the order synth → build-manifest → train → eval → report →
//! export-emb. Each stage owns one directory under the output root and writes
//! a `stage.json` recording a fingerprint of its configuration and upstream
//! outputs plus the SHA-256 of every file it produced. A stage whose
//! fingerprint matches and whose outputs are intact is skipped unless forced.
//!
//! All sub-seeds are derived from the single root seed with
//! [`seed::derive_seed`] under the labels `synth`, `manifest`, `model/init`,
//! `train` and `export`; seed fields inside the per-stage sections are
//! overwritten by those derived values.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ConfigError, ManifestError, TrainError};
use crate::fairmetrics::{self, EmbeddingRow, FamilyEmbeddings, TrainLogRecord};
use crate::manifest::{self, SplitName};
use crate::modelcore::{ModelConfig, TrainMode};
use crate::seed;
use crate::synthgen::{self, ImageStore, SynthConfig};
use crate::trainer::{self, eval, TrainConfig, TrainData};

/// Environment variable that overrides the output root.
pub const OUT_ROOT_ENV: &str = "KINFAIR_OUT_ROOT";
pub const STAGE_FILE: &str = "stage.json";
pub const EFFECTIVE_CONFIG_FILE: &str = "config.json";
pub const TRAIN_LOG_FILE: &str = "train.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const REPORT_CSV_FILE: &str = "report.csv";
pub const ANGLES_FILE: &str = "angles.json";
pub const STD_CURVE_FILE: &str = "std_curve.csv";
pub const EMBEDDINGS_FILE: &str = "emb.tsv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Synth,
    BuildManifest,
    Train,
    Eval,
    Report,
    ExportEmb,
}

impl Stage {
    pub const ALL: [Stage; 6] =
        [Stage::Synth, Stage::BuildManifest, Stage::Train, Stage::Eval, Stage::Report, Stage::ExportEmb];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::BuildManifest => "build-manifest",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Report => "report",
            Stage::ExportEmb => "export-emb",
        }
    }

    /// Directory name under the output root.
    pub fn dir(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::BuildManifest => "manifest",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Report => "report",
            Stage::ExportEmb => "export",
        }
    }

    /// Process exit status when this stage fails.
    pub fn exit_code(self) -> i32 {
        match self {
            Stage::Synth => 10,
            Stage::BuildManifest => 11,
            Stage::Train => 12,
            Stage::Eval => 13,
            Stage::Report => 14,
            Stage::ExportEmb => 15,
        }
    }

    pub fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::Synth => &[],
            Stage::BuildManifest => &[Stage::Synth],
            Stage::Train => &[Stage::BuildManifest],
            Stage::Eval | Stage::ExportEmb => &[Stage::BuildManifest, Stage::Train],
            Stage::Report => &[Stage::Train],
        }
    }

    pub fn parse(name: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|s| s.name() == name)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Exit status for configuration and usage errors.
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("stage {stage} needs the outputs of {upstream}; run {upstream} first")]
    MissingUpstream { stage: Stage, upstream: Stage },
    #[error("stage {stage} failed: {message}")]
    Stage { stage: Stage, message: String },
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => EXIT_CONFIG,
            PipelineError::MissingUpstream { stage, .. } | PipelineError::Stage { stage, .. } => stage.exit_code(),
        }
    }

    fn stage(stage: Stage, e: impl fmt::Display) -> Self {
        PipelineError::Stage { stage, message: e.to_string() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub out_dir: PathBuf,
    /// Directory of `*.jsonl` source tables. When unset, build-manifest reads
    /// the tables emitted by the synth stage.
    pub sources_dir: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths { out_dir: PathBuf::from("runs/default"), sources_dir: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ManifestOptions {
    pub ratios: [f64; 3],
    pub cap: usize,
    pub neg_per_pos: usize,
    pub balance_tolerance: f64,
}

impl Default for ManifestOptions {
    fn default() -> Self {
        ManifestOptions {
            ratios: manifest::DEFAULT_SPLIT_RATIOS,
            cap: manifest::DEFAULT_IMAGE_CAP,
            neg_per_pos: 1,
            balance_tolerance: manifest::DEFAULT_BALANCE_TOLERANCE,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointChoice {
    #[default]
    Final,
    AccBest,
    StdBest,
}

impl CheckpointChoice {
    pub fn file(self) -> &'static str {
        match self {
            CheckpointChoice::Final => "final.ckpt.json",
            CheckpointChoice::AccBest => "acc_best.ckpt.json",
            CheckpointChoice::StdBest => "std_best.ckpt.json",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub checkpoint: CheckpointChoice,
    pub export_per_race: usize,
    pub angle_families_per_race: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { checkpoint: CheckpointChoice::Final, export_per_race: 400, angle_families_per_race: 20 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub paths: Paths,
    pub seed: u64,
    pub synth: SynthConfig,
    pub manifest: ManifestOptions,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|source| ConfigError::Json { path: path.to_path_buf(), source })
    }

    /// Overwrites every sub-seed with the value derived from the root seed.
    pub fn apply_seed(&mut self) {
        self.synth.seed = seed::derive_seed(self.seed, "synth");
        self.model.init_seed = seed::derive_seed(self.seed, "model/init");
        self.train.seed = seed::derive_seed(self.seed, "train");
    }

    pub fn manifest_seed(&self) -> u64 {
        seed::derive_seed(self.seed, "manifest")
    }

    pub fn export_seed(&self) -> u64 {
        seed::derive_seed(self.seed, "export")
    }

    /// Validates every section; nothing runs unless all pass.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.synth.validate()?;
        self.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train.validate()?;
        let r = self.manifest.ratios;
        if r.iter().any(|&x| !(x > 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(ConfigError::Invalid(format!("manifest.ratios {r:?} must be positive and sum to 1")));
        }
        if self.manifest.cap == 0 || self.manifest.neg_per_pos == 0 {
            return Err(ConfigError::Invalid("manifest.cap and manifest.neg_per_pos must be positive".into()));
        }
        if self.paths.sources_dir.is_none()
            && (self.model.image_size != self.synth.image_size || self.model.in_channels != self.synth.channels)
        {
            return Err(ConfigError::Invalid(format!(
                "model expects {:?}x{} images but synth produces {:?}x{}",
                self.model.image_size, self.model.in_channels, self.synth.image_size, self.synth.channels
            )));
        }
        Ok(())
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.paths.out_dir.join(stage.dir())
    }
}

/// Output root precedence: explicit flag, then [`OUT_ROOT_ENV`], then the config.
pub fn resolve_out_root(cfg: &mut RunConfig, flag: Option<PathBuf>) {
    if let Some(dir) = flag {
        cfg.paths.out_dir = dir;
    } else if let Some(dir) = std::env::var_os(OUT_ROOT_ENV) {
        cfg.paths.out_dir = PathBuf::from(dir);
    }
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let bytes = fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn sha256_json<T: Serialize>(value: &T) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(value).expect("serializable")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    /// Hash of the stage configuration and upstream output hashes.
    pub fingerprint: String,
    /// Relative path → SHA-256 of every output file.
    pub outputs: BTreeMap<String, String>,
}

impl StageRecord {
    pub fn read(dir: &Path) -> Option<StageRecord> {
        let text = fs::read_to_string(dir.join(STAGE_FILE)).ok()?;
        serde_json::from_str(&text).ok()
    }

    /// True when every recorded output still hashes to its recorded value.
    pub fn outputs_intact(&self, dir: &Path) -> bool {
        self.outputs
            .iter()
            .all(|(rel, hash)| sha256_file(&dir.join(rel)).is_ok_and(|h| &h == hash))
    }
}

fn list_files(dir: &Path, base: &Path, out: &mut Vec<String>) -> std::io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            list_files(&path, base, out)?;
        } else if path.file_name().is_some_and(|n| n != STAGE_FILE) {
            out.push(path.strip_prefix(base).unwrap().to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

/// Hashes every file currently under `dir` except the stage record.
pub fn hash_outputs(dir: &Path) -> std::io::Result<BTreeMap<String, String>> {
    let mut files = Vec::new();
    list_files(dir, dir, &mut files)?;
    files.sort();
    files.into_iter().map(|rel| Ok((rel.clone(), sha256_file(&dir.join(&rel))?))).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Ran,
    Skipped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: Stage,
    pub status: StageStatus,
    pub dir: PathBuf,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub ok: bool,
    pub stages: Vec<StageSummary>,
}

/// Runs `body` into `dir` unless a matching, intact stage record exists.
fn tracked_stage(
    stage: Stage,
    dir: &Path,
    fingerprint: String,
    force: bool,
    body: impl FnOnce(&Path) -> Result<(), PipelineError>,
) -> Result<StageSummary, PipelineError> {
    if !force {
        if let Some(rec) = StageRecord::read(dir) {
            if rec.fingerprint == fingerprint && rec.outputs_intact(dir) {
                info!("{stage}: up to date, skipping");
                return Ok(StageSummary { stage, status: StageStatus::Skipped, dir: dir.to_path_buf(), outputs: rec.outputs });
            }
            info!("{stage}: inputs or outputs changed, re-running");
        }
    }
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| PipelineError::stage(stage, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| PipelineError::stage(stage, e))?;
    info!("{stage}: running");
    body(dir)?;
    let outputs = hash_outputs(dir).map_err(|e| PipelineError::stage(stage, e))?;
    let rec = StageRecord { stage, fingerprint, outputs: outputs.clone() };
    let text = serde_json::to_string_pretty(&rec).expect("serializable") + "\n";
    fs::write(dir.join(STAGE_FILE), text).map_err(|e| PipelineError::stage(stage, e))?;
    Ok(StageSummary { stage, status: StageStatus::Ran, dir: dir.to_path_buf(), outputs })
}

// Stage bodies. Each is usable on its own by the matching subcommand.

pub fn synth_stage(cfg: &SynthConfig, out: &Path) -> Result<(), PipelineError> {
    let pop = synthgen::make_population(cfg)?;
    synthgen::write_population(out, &pop).map_err(|e| PipelineError::stage(Stage::Synth, e))?;
    info!("synth: {} identities, {} images", pop.manifest.records.len(), pop.images.len());
    Ok(())
}

/// Finds `images.bin` in the sources directory or its parent.
fn locate_images(sources: &Path) -> Option<PathBuf> {
    [sources.join(synthgen::IMAGES_FILE), sources.join("..").join(synthgen::IMAGES_FILE)]
        .into_iter()
        .find(|p| p.is_file())
}

pub fn build_manifest_stage(sources: &Path, out: &Path, opts: &ManifestOptions, seed: u64) -> Result<(), PipelineError> {
    let err = |e: ManifestError| PipelineError::stage(Stage::BuildManifest, e);
    if !sources.is_dir() {
        return Err(PipelineError::MissingUpstream { stage: Stage::BuildManifest, upstream: Stage::Synth });
    }
    let tables = manifest::read_source_dir(sources).map_err(err)?;
    if tables.is_empty() {
        return Err(PipelineError::MissingUpstream { stage: Stage::BuildManifest, upstream: Stage::Synth });
    }
    let merged = manifest::merge_sources(&tables, opts.cap, seed::derive_seed(seed, "cap")).map_err(err)?;
    let splits = manifest::build_split_manifest(
        &merged.manifest,
        opts.ratios,
        opts.neg_per_pos,
        seed::derive_seed(seed, "split"),
        opts.balance_tolerance,
    )
    .map_err(err)?;
    manifest::write_outputs(out, &merged, &splits).map_err(|e| err(e.into()))?;
    if let Some(images) = locate_images(sources) {
        fs::copy(images, out.join(synthgen::IMAGES_FILE)).map_err(|e| PipelineError::stage(Stage::BuildManifest, e))?;
    } else {
        warn!("build-manifest: no {} next to {}; training will need one", synthgen::IMAGES_FILE, sources.display());
    }
    info!(
        "build-manifest: {} identities, pairs train/val/test = {}/{}/{}",
        merged.manifest.records.len(),
        splits.train.len(),
        splits.val.len(),
        splits.test.len()
    );
    Ok(())
}

/// Loaded manifest directory: image store plus the three pair lists.
pub struct ManifestDir {
    pub images: ImageStore,
    pub train: Vec<manifest::PairSample>,
    pub val: Vec<manifest::PairSample>,
    pub test: Vec<manifest::PairSample>,
}

pub fn load_manifest_dir(dir: &Path, stage: Stage) -> Result<ManifestDir, PipelineError> {
    let missing = || PipelineError::MissingUpstream { stage, upstream: Stage::BuildManifest };
    let images_path = dir.join(synthgen::IMAGES_FILE);
    if !images_path.is_file() || SplitName::ALL.iter().any(|&s| !dir.join(manifest::pairs_file(s)).is_file()) {
        return Err(missing());
    }
    let images = ImageStore::read_from(&images_path).map_err(|e| PipelineError::stage(stage, e))?;
    let read = |s| manifest::read_pairs(dir, s).map_err(|e| PipelineError::stage(stage, e));
    Ok(ManifestDir { images, train: read(SplitName::Train)?, val: read(SplitName::Val)?, test: read(SplitName::Test)? })
}

pub fn train_stage(
    manifest_dir: &Path,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    out: &Path,
) -> Result<(), PipelineError> {
    let err = |e: TrainError| PipelineError::stage(Stage::Train, e);
    let data = load_manifest_dir(manifest_dir, Stage::Train)?;
    let [h, w, c] = data.images.shape();
    if (h, w) != model_cfg.image_size || c != model_cfg.in_channels {
        return Err(PipelineError::stage(
            Stage::Train,
            format!("images are {h}x{w}x{c}, model expects {:?}x{}", model_cfg.image_size, model_cfg.in_channels),
        ));
    }
    fs::create_dir_all(out).map_err(|e| PipelineError::stage(Stage::Train, e))?;
    let log_file = fs::File::create(out.join(TRAIN_LOG_FILE)).map_err(|e| PipelineError::stage(Stage::Train, e))?;
    let mut log = BufWriter::new(log_file);
    let mut write_error = None;
    let train_data = TrainData { images: &data.images, train: &data.train, val: &data.val };
    let result = trainer::train(model_cfg.clone(), train_cfg, &train_data, |rec| {
        let line = serde_json::to_string(rec).expect("serializable");
        if let Err(e) = writeln!(log, "{line}").and_then(|_| log.flush()) {
            write_error.get_or_insert(e);
        }
    });
    if let Some(e) = write_error {
        return Err(PipelineError::stage(Stage::Train, e));
    }
    let save = |m: &crate::modelcore::Model, choice: CheckpointChoice| {
        trainer::save_checkpoint(m, &out.join(choice.file())).map_err(|e| PipelineError::stage(Stage::Train, e))
    };
    match result {
        Ok(outcome) => {
            save(&outcome.model, CheckpointChoice::Final)?;
            save(&outcome.acc_best, CheckpointChoice::AccBest)?;
            save(&outcome.std_best, CheckpointChoice::StdBest)?;
            Ok(())
        }
        Err(TrainError::NonFinite { iteration, last_good }) => {
            let path = out.join("last_good.ckpt.json");
            trainer::save_checkpoint(&last_good, &path).map_err(|e| PipelineError::stage(Stage::Train, e))?;
            Err(PipelineError::stage(
                Stage::Train,
                format!("non-finite loss at iteration {iteration}; last good weights in {}", path.display()),
            ))
        }
        Err(e) => Err(err(e)),
    }
}

fn load_model(checkpoint: &Path, stage: Stage) -> Result<crate::modelcore::Model, PipelineError> {
    if !checkpoint.is_file() {
        return Err(PipelineError::MissingUpstream { stage, upstream: Stage::Train });
    }
    trainer::load_checkpoint(checkpoint).map_err(|e| PipelineError::stage(stage, e))
}

/// Writes the fairness report (`report.json` at `out`, CSV alongside) and,
/// when `angles` is given, the intra/inter-family angle report.
pub fn eval_stage(
    checkpoint: &Path,
    manifest_dir: &Path,
    out: &Path,
    angles: Option<(&Path, usize, u64)>,
) -> Result<fairmetrics::FairnessReport, PipelineError> {
    let err = |e: TrainError| PipelineError::stage(Stage::Eval, e);
    let io = |e: std::io::Error| PipelineError::stage(Stage::Eval, e);
    let model = load_model(checkpoint, Stage::Eval)?;
    let data = load_manifest_dir(manifest_dir, Stage::Eval)?;
    let report = eval::evaluate(&model, &data.images, &data.val, &data.test).map_err(err)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io)?;
    }
    fs::write(out, serde_json::to_string_pretty(&report).expect("serializable") + "\n").map_err(io)?;
    fs::write(out.with_extension("csv"), report.to_csv()).map_err(io)?;

    if let Some((path, per_race, seed)) = angles {
        let embs = eval::image_embeddings(&model, &data.images, &data.test).map_err(err)?;
        let mut families: BTreeMap<String, FamilyEmbeddings> = BTreeMap::new();
        for emb in embs {
            families
                .entry(emb.family_id.clone())
                .or_insert_with(|| FamilyEmbeddings { family_id: emb.family_id.clone(), race: emb.race, embeddings: vec![] })
                .embeddings
                .push(emb.e);
        }
        let all: Vec<FamilyEmbeddings> = families.into_values().collect();
        let sample = fairmetrics::sample_families(&all, per_race, seed);
        let angle_report = fairmetrics::intra_inter_angles(&sample);
        fs::write(path, serde_json::to_string_pretty(&angle_report).expect("serializable") + "\n").map_err(io)?;
    }
    Ok(report)
}

pub fn read_train_log(path: &Path) -> Result<Vec<TrainLogRecord>, PipelineError> {
    if !path.is_file() {
        return Err(PipelineError::MissingUpstream { stage: Stage::Report, upstream: Stage::Train });
    }
    manifest::read_jsonl(path).map_err(|e| PipelineError::stage(Stage::Report, e))
}

pub fn report_stage(log: &Path, out: &Path) -> Result<(), PipelineError> {
    let records = read_train_log(log)?;
    let csv = fairmetrics::std_trajectory_csv(&fairmetrics::std_trajectory(&records));
    fs::write(out, csv).map_err(|e| PipelineError::stage(Stage::Report, e))
}

/// Anchor-image embeddings of up to `per_race` test pairs per race.
pub fn export_stage(
    checkpoint: &Path,
    manifest_dir: &Path,
    out: &Path,
    per_race: usize,
    seed: u64,
) -> Result<usize, PipelineError> {
    let model = load_model(checkpoint, Stage::ExportEmb)?;
    let data = load_manifest_dir(manifest_dir, Stage::ExportEmb)?;
    let keys: Vec<&str> = data.test.iter().map(|p| p.img_a.as_str()).collect();
    let packs = eval::embed_images(&model, &data.images, &keys).map_err(|e| PipelineError::stage(Stage::ExportEmb, e))?;
    let rows: Vec<EmbeddingRow> = data
        .test
        .iter()
        .map(|p| EmbeddingRow { values: packs[&p.img_a].e.data().to_vec(), race: p.race_a, family_id: p.family_a.clone() })
        .collect();
    let sample = fairmetrics::sample_rows_per_race(&rows, per_race, seed);
    let file = fs::File::create(out).map_err(|e| PipelineError::stage(Stage::ExportEmb, e))?;
    let mut w = BufWriter::new(file);
    let n = fairmetrics::export_embeddings(&sample, &mut w).map_err(|e| PipelineError::stage(Stage::ExportEmb, e))?;
    w.flush().map_err(|e| PipelineError::stage(Stage::ExportEmb, e))?;
    Ok(n)
}

fn upstream_hashes(cfg: &RunConfig, stage: Stage) -> Result<BTreeMap<String, BTreeMap<String, String>>, PipelineError> {
    let mut out = BTreeMap::new();
    for &up in stage.upstream() {
        if up == Stage::Synth && cfg.paths.sources_dir.is_some() {
            continue;
        }
        let dir = cfg.stage_dir(up);
        let rec = StageRecord::read(&dir).ok_or(PipelineError::MissingUpstream { stage, upstream: up })?;
        if !rec.outputs_intact(&dir) {
            return Err(PipelineError::MissingUpstream { stage, upstream: up });
        }
        out.insert(up.name().to_string(), rec.outputs);
    }
    Ok(out)
}

fn stage_config(cfg: &RunConfig, stage: Stage) -> serde_json::Value {
    match stage {
        Stage::Synth => serde_json::json!(cfg.synth),
        Stage::BuildManifest => serde_json::json!({
            "manifest": cfg.manifest,
            "seed": cfg.manifest_seed(),
            "sources": cfg.paths.sources_dir,
        }),
        Stage::Train => serde_json::json!({ "model": cfg.model, "train": cfg.train }),
        Stage::Eval => serde_json::json!({
            "checkpoint": cfg.eval.checkpoint,
            "angle_families_per_race": cfg.eval.angle_families_per_race,
            "seed": cfg.export_seed(),
        }),
        Stage::Report => serde_json::Value::Null,
        Stage::ExportEmb => serde_json::json!({
            "checkpoint": cfg.eval.checkpoint,
            "per_race": cfg.eval.export_per_race,
            "seed": cfg.export_seed(),
        }),
    }
}

fn run_one(cfg: &RunConfig, stage: Stage, force: bool) -> Result<StageSummary, PipelineError> {
    let upstream = upstream_hashes(cfg, stage)?;
    let fingerprint = sha256_json(&serde_json::json!({
        "stage": stage,
        "config": stage_config(cfg, stage),
        "upstream": upstream,
    }));
    let dir = cfg.stage_dir(stage);
    let manifest_dir = cfg.stage_dir(Stage::BuildManifest);
    let checkpoint = cfg.stage_dir(Stage::Train).join(cfg.eval.checkpoint.file());
    tracked_stage(stage, &dir, fingerprint, force, |out| match stage {
        Stage::Synth => synth_stage(&cfg.synth, out),
        Stage::BuildManifest => {
            let sources = cfg.paths.sources_dir.clone().unwrap_or_else(|| cfg.stage_dir(Stage::Synth).join("sources"));
            build_manifest_stage(&sources, out, &cfg.manifest, cfg.manifest_seed())
        }
        Stage::Train => train_stage(&manifest_dir, &cfg.model, &cfg.train, out),
        Stage::Eval => {
            let angles = out.join(ANGLES_FILE);
            let per_race = cfg.eval.angle_families_per_race;
            eval_stage(&checkpoint, &manifest_dir, &out.join(REPORT_FILE), Some((&angles, per_race, cfg.export_seed())))
                .map(|_| ())
        }
        Stage::Report => report_stage(&cfg.stage_dir(Stage::Train).join(TRAIN_LOG_FILE), &out.join(STD_CURVE_FILE)),
        Stage::ExportEmb => export_stage(
            &checkpoint,
            &manifest_dir,
            &out.join(EMBEDDINGS_FILE),
            cfg.eval.export_per_race,
            cfg.export_seed(),
        )
        .map(|_| ()),
    })
}

/// Runs the selected stages (all when `stages` is empty) in dependency order.
/// `cfg` must already have its seeds applied and output root resolved.
pub fn run_pipeline(cfg: &RunConfig, stages: &[Stage], force: bool) -> Result<RunSummary, PipelineError> {
    cfg.validate()?;
    let mut selected: Vec<Stage> = if stages.is_empty() { Stage::ALL.to_vec() } else { stages.to_vec() };
    selected.sort();
    selected.dedup();
    if cfg.paths.sources_dir.is_some() {
        selected.retain(|&s| s != Stage::Synth);
    }
    fs::create_dir_all(&cfg.paths.out_dir).map_err(ConfigError::Io)?;
    let effective = serde_json::to_string_pretty(cfg).expect("serializable") + "\n";
    fs::write(cfg.paths.out_dir.join(EFFECTIVE_CONFIG_FILE), effective).map_err(ConfigError::Io)?;
    let mut summaries = Vec::new();
    for stage in selected {
        summaries.push(run_one(cfg, stage, force)?);
    }
    Ok(RunSummary { ok: true, stages: summaries })
}

/// Convenience for loading, seeding and running a config file.
pub fn run_config_file(path: &Path, stages: &[Stage], force: bool) -> Result<RunSummary, PipelineError> {
    let mut cfg = RunConfig::from_file(path)?;
    resolve_out_root(&mut cfg, None);
    cfg.apply_seed();
    run_pipeline(&cfg, stages, force)
}

/// Training mode parsed from its command-line spelling.
pub fn parse_mode(s: &str) -> Result<TrainMode, ConfigError> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| ConfigError::Invalid(format!("unknown mode {s:?} (multi_task or adversarial)")))
}
