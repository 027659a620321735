use std::fs;
use std::path::Path;
use std::process::Command;

use kinfair::manifest::{self, SplitName};
use kinfair::pipeline::{self, PipelineError, RunConfig, Stage, StageStatus};

fn quick_config(root: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.paths.out_dir = root.to_path_buf();
    cfg.seed = 3;
    cfg.train.max_iterations = 12;
    cfg.train.eval_every = 6;
    cfg.eval.export_per_race = 10;
    cfg.eval.angle_families_per_race = 3;
    cfg.apply_seed();
    cfg
}

fn statuses(summary: &pipeline::RunSummary) -> Vec<(Stage, StageStatus)> {
    summary.stages.iter().map(|s| (s.stage, s.status)).collect()
}

#[test]
fn full_run_skip_and_tamper() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path());
    let first = pipeline::run_pipeline(&cfg, &[], false).unwrap();
    assert!(first.stages.iter().all(|s| s.status == StageStatus::Ran));
    assert_eq!(first.stages.len(), Stage::ALL.len());
    for (stage, file) in [
        (Stage::Train, pipeline::TRAIN_LOG_FILE),
        (Stage::Eval, pipeline::REPORT_FILE),
        (Stage::Eval, pipeline::REPORT_CSV_FILE),
        (Stage::Eval, pipeline::ANGLES_FILE),
        (Stage::Report, pipeline::STD_CURVE_FILE),
        (Stage::ExportEmb, pipeline::EMBEDDINGS_FILE),
    ] {
        assert!(cfg.stage_dir(stage).join(file).is_file(), "{stage}: {file}");
    }
    let echoed: RunConfig =
        serde_json::from_str(&fs::read_to_string(dir.path().join(pipeline::EFFECTIVE_CONFIG_FILE)).unwrap()).unwrap();
    assert_eq!(echoed, cfg);

    let second = pipeline::run_pipeline(&cfg, &[], false).unwrap();
    assert!(second.stages.iter().all(|s| s.status == StageStatus::Skipped));

    // A corrupted output re-runs its stage; identical regenerated outputs let downstream skip.
    let pairs = cfg.stage_dir(Stage::BuildManifest).join(manifest::pairs_file(SplitName::Train));
    fs::write(&pairs, "corrupted\n").unwrap();
    let third = pipeline::run_pipeline(&cfg, &[], false).unwrap();
    let ran: Vec<Stage> = statuses(&third).into_iter().filter(|s| s.1 == StageStatus::Ran).map(|s| s.0).collect();
    assert_eq!(ran, vec![Stage::BuildManifest]);

    let forced = pipeline::run_pipeline(&cfg, &[Stage::Report], true).unwrap();
    assert_eq!(statuses(&forced), vec![(Stage::Report, StageStatus::Ran)]);
}

#[test]
fn missing_upstream_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path());
    let err = pipeline::run_pipeline(&cfg, &[Stage::Train], false).unwrap_err();
    assert!(matches!(err, PipelineError::MissingUpstream { stage: Stage::Train, upstream: Stage::BuildManifest }), "{err}");
    assert_eq!(err.exit_code(), 12);
}

#[test]
fn cli_exit_codes_and_summary() {
    let exe = env!("CARGO_BIN_EXE_kinfair");
    let dir = tempfile::tempdir().unwrap();

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"train": {"learning_rate": 0.1}}"#).unwrap();
    let out = Command::new(exe).args(["--config", bad.to_str().unwrap(), "run"]).output().unwrap();
    assert_eq!(out.status.code(), Some(pipeline::EXIT_CONFIG));

    let out = Command::new(exe)
        .args(["train", "--manifest", dir.path().join("nowhere").to_str().unwrap(), "--out"])
        .arg(dir.path().join("train"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(Stage::Train.exit_code()));

    let synth = dir.path().join("synth");
    let out = Command::new(exe).args(["--seed", "4", "synth", "--out"]).arg(&synth).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["ok"], true);
    assert_eq!(summary["stages"][0]["stage"], "synth");

    let mdir = dir.path().join("manifest");
    let out = Command::new(exe)
        .args(["build-manifest", "--ratios", "0.5,0.25,0.25", "--sources"])
        .arg(synth.join("sources"))
        .arg("--out")
        .arg(&mdir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for s in SplitName::ALL {
        assert!(!manifest::read_pairs(&mdir, s).unwrap().is_empty());
    }
}

#[test]
fn cli_rejects_two_ratios() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_kinfair"))
        .args(["build-manifest", "--ratios", "0.5,0.5", "--sources"])
        .arg(dir.path())
        .arg("--out")
        .arg(dir.path().join("m"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(pipeline::EXIT_CONFIG));
}
