//! Model evaluation on manifest pairs.

use std::collections::BTreeMap;

use crate::error::TrainError;
use crate::fairmetrics::{self, FairnessReport, ScoredPair};
use crate::manifest::{PairSample, RaceLabel};
use crate::modelcore::{FeaturePack, Model};
use crate::synthgen::ImageStore;

const CHUNK: usize = 64;

/// Backbone outputs for every distinct image key, computed in chunks.
pub fn embed_images<S: AsRef<str>>(
    model: &Model,
    images: &ImageStore,
    keys: &[S],
) -> Result<BTreeMap<String, FeaturePack>, TrainError> {
    let mut unique: Vec<&str> = keys.iter().map(AsRef::as_ref).collect();
    unique.sort_unstable();
    unique.dedup();
    let mut out = BTreeMap::new();
    for chunk in unique.chunks(CHUNK) {
        let batch = images.batch(chunk).ok_or_else(|| {
            let missing = chunk.iter().find(|k| images.get(k).is_none()).unwrap();
            TrainError::MissingImage(missing.to_string())
        })?;
        for (key, pack) in chunk.iter().zip(model.features(&batch)?) {
            out.insert(key.to_string(), pack);
        }
    }
    Ok(out)
}

/// Kinship similarity for each pair, in input order.
pub fn score_pairs(model: &Model, images: &ImageStore, pairs: &[PairSample]) -> Result<Vec<ScoredPair>, TrainError> {
    let keys: Vec<&str> = pairs.iter().flat_map(|p| [p.img_a.as_str(), p.img_b.as_str()]).collect();
    let packs = embed_images(model, images, &keys)?;
    let mut scored = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(CHUNK) {
        let first: Vec<FeaturePack> = chunk.iter().map(|p| packs[&p.img_a].clone()).collect();
        let second: Vec<FeaturePack> = chunk.iter().map(|p| packs[&p.img_b].clone()).collect();
        let sims = model.pair_similarities(&first, &second);
        scored.extend(chunk.iter().zip(sims).map(|(p, similarity)| ScoredPair {
            similarity,
            is_kin: p.is_kin,
            race: p.race_a,
        }));
    }
    Ok(scored)
}

/// Threshold chosen on `val`, then per-race accuracy on `test` at that threshold.
pub fn evaluate(
    model: &Model,
    images: &ImageStore,
    val: &[PairSample],
    test: &[PairSample],
) -> Result<FairnessReport, TrainError> {
    let val_scored = score_pairs(model, images, val)?;
    let sims: Vec<f64> = val_scored.iter().map(|p| p.similarity).collect();
    let labels: Vec<bool> = val_scored.iter().map(|p| p.is_kin).collect();
    let threshold = fairmetrics::select_threshold(&sims, &labels)?;
    let test_scored = if std::ptr::eq(val, test) { val_scored } else { score_pairs(model, images, test)? };
    Ok(fairmetrics::per_race_accuracy(&test_scored, threshold)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageEmbedding {
    pub key: String,
    pub e: Vec<f64>,
    pub race: RaceLabel,
    pub family_id: String,
}

/// Backbone embeddings `e` of every image referenced by `pairs`, sorted by key.
pub fn image_embeddings(model: &Model, images: &ImageStore, pairs: &[PairSample]) -> Result<Vec<ImageEmbedding>, TrainError> {
    let mut meta = BTreeMap::new();
    for p in pairs {
        meta.insert(p.img_a.clone(), (p.race_a, p.family_a.clone()));
        meta.insert(p.img_b.clone(), (p.race_b, p.family_b.clone()));
    }
    let keys: Vec<&String> = meta.keys().collect();
    let packs = embed_images(model, images, &keys)?;
    Ok(meta
        .into_iter()
        .map(|(key, (race, family_id))| ImageEmbedding { e: packs[&key].e.data().to_vec(), key, race, family_id })
        .collect())
}
