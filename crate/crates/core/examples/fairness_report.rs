//! Per-race accuracy, the std fairness metric, embedding angles and the TSV
//! export, on hand-made scores.
//!
//! cargo run --example fairness_report

use kinfair::fairmetrics::{self, EmbeddingRow, FairnessReport, FamilyEmbeddings, ScoredPair};
use kinfair::manifest::RaceLabel;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let races = RaceLabel::ALL;
    let pairs: Vec<ScoredPair> = (0..80)
        .map(|k| {
            let is_kin = k % 2 == 0;
            let race = races[k % 4 / 2 * 2 + k / 40];
            let noise = ((k * 37) % 11) as f64 / 20.0 - 0.25;
            ScoredPair { similarity: if is_kin { 0.4 + noise } else { 0.1 + noise }, is_kin, race }
        })
        .collect();
    let sims: Vec<f64> = pairs.iter().map(|p| p.similarity).collect();
    let labels: Vec<bool> = pairs.iter().map(|p| p.is_kin).collect();
    let t = fairmetrics::select_threshold(&sims, &labels)?;
    let report = fairmetrics::per_race_accuracy(&pairs, t)?;
    print!("{}", report.to_csv());
    println!("std {:.3}", report.std);

    // Per-race accuracies reported for a baseline model.
    let acc = races.into_iter().zip([82.18, 83.71, 78.00, 80.70]).collect();
    let counts = races.into_iter().map(|r| (r, 1)).collect();
    println!("baseline std {:.2}", FairnessReport::from_accuracies(acc, counts, 0.0).std);

    let families: Vec<FamilyEmbeddings> = (0..8)
        .map(|f| FamilyEmbeddings {
            family_id: format!("F{f}"),
            race: races[f % 4],
            embeddings: (0..3).map(|m| vec![1.0 + f as f64, 0.2 * m as f64, (f % 3) as f64]).collect(),
        })
        .collect();
    let angles = fairmetrics::intra_inter_angles(&families);
    println!("intra-family angles {:?}", angles.intra_per_race);
    println!("inter-family angles {:?}", angles.inter_per_race);

    let rows: Vec<EmbeddingRow> = families
        .iter()
        .flat_map(|f| f.embeddings.iter().map(|e| EmbeddingRow { values: e.clone(), race: f.race, family_id: f.family_id.clone() }))
        .collect();
    let mut tsv = Vec::new();
    fairmetrics::export_embeddings(&fairmetrics::sample_rows_per_race(&rows, 2, 0), &mut tsv)?;
    print!("{}", String::from_utf8(tsv)?);
    Ok(())
}
