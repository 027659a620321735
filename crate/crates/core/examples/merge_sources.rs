//! Merges two source tables with annotator votes, caps identities at 30
//! images, splits by family and prints the race distribution table.
//!
//! cargo run --example merge_sources

use kinfair::manifest::{self, KinEdge, KinType, RaceLabel, SourceRow, SourceTable, SplitName};

fn family(source: &str, f: usize, race: RaceLabel, images: usize) -> Vec<SourceRow> {
    let fam = format!("{source}/F{f}");
    let ids = ["father", "son"].map(|r| format!("{fam}/{r}"));
    let mut votes = vec![race; 3];
    if f % 7 == 3 {
        // one dissenting annotator still leaves a majority
        votes[2] = RaceLabel::Indian;
    }
    ids.iter()
        .enumerate()
        .map(|(k, id)| SourceRow {
            identity_id: id.clone(),
            family_id: fam.clone(),
            images: (0..images + 13 * k).map(|i| format!("{id}/{i}.jpg")).collect(),
            annotator_votes: Some(if f % 11 == 5 {
                vec![RaceLabel::African, RaceLabel::Asian, RaceLabel::Caucasian]
            } else {
                votes.clone()
            }),
            race: None,
            kin_edges: if k == 0 {
                vec![KinEdge { parent_id: ids[0].clone(), child_id: ids[1].clone(), kin_type: KinType::FS }]
            } else {
                vec![]
            },
            source_dataset: None,
        })
        .collect()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let tables: Vec<SourceTable> = [("small", 5, 8), ("large", 40, 25)]
        .into_iter()
        .map(|(name, families, images)| SourceTable {
            name: name.into(),
            rows: (0..families).flat_map(|f| family(name, f, RaceLabel::ALL[f % 4], images)).collect(),
        })
        .collect();
    let merged = manifest::merge_sources(&tables, manifest::DEFAULT_IMAGE_CAP, 0)?;
    println!("rejected by vote: {:?}", merged.rejected);
    print!("{}", merged.distribution.to_csv());

    let splits = manifest::build_split_manifest(&merged.manifest, [0.7, 0.15, 0.15], 1, 0, manifest::DEFAULT_BALANCE_TOLERANCE)?;
    for s in SplitName::ALL {
        let pairs = splits.pairs(s);
        let kin = pairs.iter().filter(|p| p.is_kin).count();
        println!("{:<5} families {:>3}  pairs {:>5} ({kin} kin)", s.as_str(), splits.split.families(s).len(), pairs.len());
    }
    println!("largest race-share deviation across splits: {:.1} pp", 100.0 * splits.split.balance.max_deviation);
    Ok(())
}
