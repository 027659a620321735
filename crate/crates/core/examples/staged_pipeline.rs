//! Runs every pipeline stage into a directory, then runs again to show that
//! unchanged stages are skipped.
//!
//! cargo run --release --example staged_pipeline -- [out_dir] [iterations]

use kinfair::pipeline::{self, RunConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let mut cfg = RunConfig::default();
    pipeline::resolve_out_root(&mut cfg, args.next().map(Into::into));
    if let Some(n) = args.next() {
        cfg.train.max_iterations = n.parse()?;
    }
    cfg.apply_seed();
    for attempt in ["first", "second"] {
        let summary = pipeline::run_pipeline(&cfg, &[], false)?;
        let status: Vec<String> = summary.stages.iter().map(|s| format!("{}={:?}", s.stage, s.status)).collect();
        println!("{attempt} run: {}", status.join(" "));
    }
    let report = std::fs::read_to_string(cfg.paths.out_dir.join("eval").join(pipeline::REPORT_FILE))?;
    println!("{report}");
    Ok(())
}
