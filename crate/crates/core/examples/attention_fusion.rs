//! Runs the backbone and the cross-image attention module on a pair of
//! synthetic kin images and on a non-kin pair.
//!
//! cargo run --example attention_fusion

use kinfair::modelcore::{Model, ModelConfig};
use kinfair::synthgen::{self, SynthConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let pop = synthgen::make_population(&SynthConfig::default())?;
    let model = Model::new(ModelConfig::default())?;
    println!("{} parameters", model.param_count());

    let edge = &pop.manifest.edges[0];
    let parent = pop.manifest.identity(&edge.parent_id).unwrap();
    let child = pop.manifest.identity(&edge.child_id).unwrap();
    let stranger = pop.manifest.records.iter().find(|r| r.family_id != parent.family_id).unwrap();
    let keys = [&parent.images[0], &child.images[0], &stranger.images[0]];
    let packs = model.features(&pop.images.batch(&keys).unwrap())?;
    println!("feature map {:?}, embedding {:?}", packs[0].m.shape(), packs[0].e.shape());

    let (a, _) = model.attention(&packs[..1], &packs[1..2]);
    let att = &a[0].attention;
    println!("attention {:?}; first row {:?}", att.shape(), att.row(0));
    println!("fused vector width {}", a[0].fused.len());

    let first = [packs[0].clone(), packs[0].clone()];
    let second = [packs[1].clone(), packs[2].clone()];
    let sims = model.pair_similarities(&first, &second);
    println!("untrained similarity: kin {:.4}, non-kin {:.4}", sims[0], sims[1]);
    Ok(())
}
