//! Command-line entry point. Logs go to stderr; a JSON summary goes to stdout.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use kinfair::pipeline::{self, PipelineError, RunConfig, Stage, StageStatus, StageSummary};
use kinfair::ConfigError;

#[derive(Parser)]
#[command(name = "kinfair", version, about = "Fairness-aware kinship verification pipeline")]
struct Cli {
    /// Root seed; every stage derives its own sub-seed from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Re-run stages even when their inputs are unchanged.
    #[arg(long, global = true)]
    force: bool,
    /// JSON run configuration with per-stage sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic population.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge source tables, split by family and generate pairs.
    BuildManifest {
        #[arg(long)]
        sources: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Train,val,test family ratios.
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,
        /// Maximum images per identity.
        #[arg(long)]
        cap: Option<usize>,
    },
    /// Train a model on a manifest directory.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// multi_task or adversarial.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-race accuracy report for a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
    },
    /// Validation std trajectory from a training log.
    Report {
        #[arg(long)]
        log: PathBuf,
        #[arg(long, default_value = "std_curve.csv")]
        out: PathBuf,
    },
    /// Export test-pair embeddings as TSV.
    ExportEmb {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "emb.tsv")]
        out: PathBuf,
        #[arg(long)]
        per_race: Option<usize>,
    },
    /// Run the staged pipeline under the output root.
    Run {
        /// Output root (overrides the config and the environment).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated subset of stages; all by default.
        #[arg(long, value_delimiter = ',')]
        stages: Vec<String>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig, PipelineError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.apply_seed();
    Ok(cfg)
}

fn single(stage: Stage, dir: PathBuf) -> pipeline::RunSummary {
    let outputs = if dir.is_dir() { pipeline::hash_outputs(&dir).unwrap_or_default() } else { Default::default() };
    pipeline::RunSummary { ok: true, stages: vec![StageSummary { stage, status: StageStatus::Ran, dir, outputs }] }
}

fn file_summary(stage: Stage, file: PathBuf) -> pipeline::RunSummary {
    let mut outputs = std::collections::BTreeMap::new();
    if let Ok(h) = pipeline::sha256_file(&file) {
        outputs.insert(file.file_name().unwrap_or_default().to_string_lossy().into_owned(), h);
    }
    let dir = file.parent().map(PathBuf::from).unwrap_or_default();
    pipeline::RunSummary { ok: true, stages: vec![StageSummary { stage, status: StageStatus::Ran, dir, outputs }] }
}

fn execute(cli: &Cli) -> Result<pipeline::RunSummary, PipelineError> {
    let mut cfg = load_config(cli)?;
    match &cli.command {
        Command::Synth { out } => {
            cfg.synth.validate()?;
            pipeline::synth_stage(&cfg.synth, out)?;
            Ok(single(Stage::Synth, out.clone()))
        }
        Command::BuildManifest { sources, out, ratios, cap } => {
            if let Some(r) = ratios {
                cfg.manifest.ratios = r
                    .as_slice()
                    .try_into()
                    .map_err(|_| ConfigError::Invalid(format!("--ratios needs 3 values, got {}", r.len())))?;
            }
            if let Some(c) = cap {
                cfg.manifest.cap = *c;
            }
            pipeline::build_manifest_stage(sources, out, &cfg.manifest, cfg.manifest_seed())?;
            Ok(single(Stage::BuildManifest, out.clone()))
        }
        Command::Train { manifest, mode, out } => {
            if let Some(m) = mode {
                cfg.train.mode = pipeline::parse_mode(m)?;
            }
            cfg.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
            cfg.train.validate()?;
            pipeline::train_stage(manifest, &cfg.model, &cfg.train, out)?;
            Ok(single(Stage::Train, out.clone()))
        }
        Command::Eval { checkpoint, manifest, out } => {
            pipeline::eval_stage(checkpoint, manifest, out, None)?;
            Ok(file_summary(Stage::Eval, out.clone()))
        }
        Command::Report { log, out } => {
            pipeline::report_stage(log, out)?;
            Ok(file_summary(Stage::Report, out.clone()))
        }
        Command::ExportEmb { checkpoint, manifest, out, per_race } => {
            let n = per_race.unwrap_or(cfg.eval.export_per_race);
            pipeline::export_stage(checkpoint, manifest, out, n, cfg.export_seed())?;
            Ok(file_summary(Stage::ExportEmb, out.clone()))
        }
        Command::Run { out, stages } => {
            pipeline::resolve_out_root(&mut cfg, out.clone());
            let selected = stages
                .iter()
                .map(|s| Stage::parse(s).ok_or_else(|| ConfigError::Invalid(format!("unknown stage {s:?}"))))
                .collect::<Result<Vec<_>, _>>()?;
            pipeline::run_pipeline(&cfg, &selected, cli.force)
        }
    }
}

// A closed stdout (e.g. piped into `head`) is not an error worth panicking over.
fn emit(value: &serde_json::Value) {
    let _ = writeln!(std::io::stdout(), "{value}");
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(summary) => {
            emit(&serde_json::to_value(&summary).expect("serializable"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            log::error!("{e}");
            emit(&serde_json::json!({ "ok": false, "error": e.to_string() }));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
