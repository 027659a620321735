//! Generates the synthetic race-imbalanced population and shows how much
//! race and family signal each image carries.
//!
//! cargo run --example synth_population

use kinfair::losses::cosine;
use kinfair::synthgen::{self, SynthConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = SynthConfig::default();
    let pop = synthgen::make_population(&cfg)?;
    println!(
        "{} identities, {} images of {:?}x{}, max basis overlap {:.2e}",
        pop.manifest.records.len(),
        pop.images.len(),
        cfg.image_size,
        cfg.channels,
        pop.max_pattern_overlap()
    );
    for (race, n) in &cfg.families_per_race {
        println!("  {race}: {n} families");
    }
    let rec = &pop.manifest.records[0];
    let img = pop.images.get(&rec.images[0]).unwrap();
    println!(
        "{} ({}): cos with own race pattern {:.3}, with own family pattern {:.3}",
        rec.identity_id,
        rec.race,
        cosine(img, &pop.race_patterns[&rec.race]),
        cosine(img, &pop.family_patterns[&rec.family_id])
    );
    Ok(())
}
