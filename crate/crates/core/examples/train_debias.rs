//! Multi-task vs adversarial training on the synthetic race-imbalanced
//! population, over several seeds.
//!
//! cargo run --release --example train_debias -- [seeds] [iterations] [grl_lambda]

use kinfair::experiment::{prepare, run_trial, TrialConfig};
use kinfair::modelcore::TrainMode;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::init();
    let mut args = std::env::args().skip(1);
    let seeds: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(5);
    let iterations: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(500);
    let lambda: Option<f64> = args.next().map(|s| s.parse()).transpose()?;

    println!("seed  mode          macro   std    probe  per-race");
    for root in 0..seeds {
        let mut cfg = TrialConfig::default().with_seed(root);
        cfg.train.max_iterations = iterations;
        if let Some(l) = lambda {
            cfg.train.grl_lambda = l;
        }
        let data = prepare(&cfg)?;
        for mode in [TrainMode::MultiTask, TrainMode::Adversarial] {
            let t = std::time::Instant::now();
            let r = run_trial(&cfg.clone().with_mode(mode), &data)?;
            let per_race: Vec<String> = r.report.acc_per_race.iter().map(|(k, v)| format!("{k}={v:.1}")).collect();
            println!(
                "{root:<5} {:<13} {:6.2} {:6.3} {:6.3}  {}  ({:.1}s)",
                format!("{mode:?}"),
                r.report.macro_avg,
                r.report.std,
                r.probe_accuracy,
                per_race.join(" "),
                t.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}
