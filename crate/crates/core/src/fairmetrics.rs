//! Verification accuracy and fairness metrics: threshold selection,
//! per-race accuracy with cross-race standard deviation, intra/inter-family
//! embedding angles, training std trajectories and embedding export.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use log::warn;
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::MetricError;
use crate::manifest::RaceLabel;
use crate::seed;

/// How negative pairs whose images differ in race are bucketed.
pub const NEGATIVE_ATTRIBUTION: &str = "anchor_race";

/// A verification pair reduced to what the metrics need.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredPair {
    pub similarity: f64,
    pub is_kin: bool,
    /// Race of the anchor image; negatives are attributed to it.
    pub race: RaceLabel,
}

/// Kin is predicted when `similarity > threshold`.
pub fn predict_kin(similarity: f64, threshold: f64) -> bool {
    similarity > threshold
}

pub fn accuracy_at(sims: &[f64], labels: &[bool], threshold: f64) -> f64 {
    let correct = sims
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| predict_kin(s, threshold) == l)
        .count();
    correct as f64 / sims.len().max(1) as f64
}

/// Threshold maximizing overall accuracy, swept over the midpoints between
/// consecutive distinct similarities plus one point below and above the
/// range. Ties go to the lower threshold.
pub fn select_threshold(sims: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    if sims.len() != labels.len() {
        return Err(MetricError::Length(format!("{} similarities, {} labels", sims.len(), labels.len())));
    }
    let kin = labels.iter().filter(|&&l| l).count();
    if kin == 0 || kin == labels.len() {
        return Err(MetricError::SingleClass);
    }
    let mut order: Vec<(f64, bool)> = sims.iter().copied().zip(labels.iter().copied()).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Everything above the threshold is predicted kin.
    let mut best_t = order[0].0 - 1e-6;
    let mut correct = kin;
    let mut best = correct;
    let mut i = 0;
    while i < order.len() {
        let v = order[i].0;
        while i < order.len() && order[i].0 == v {
            if order[i].1 {
                correct -= 1;
            } else {
                correct += 1;
            }
            i += 1;
        }
        let t = if i < order.len() { 0.5 * (v + order[i].0) } else { v + 1e-6 };
        if correct > best {
            best = correct;
            best_t = t;
        }
    }
    Ok(best_t)
}

/// Sample standard deviation (`n - 1` denominator); 0 for fewer than two values.
pub fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    /// Accuracy in percent for every race that has test pairs.
    pub acc_per_race: BTreeMap<RaceLabel, f64>,
    /// Unweighted mean over the races present.
    pub macro_avg: f64,
    /// Mean weighted by per-race pair counts (equals overall accuracy).
    pub weighted_avg: f64,
    /// Sample standard deviation of the per-race accuracies.
    pub std: f64,
    pub threshold: f64,
    pub n_pairs_per_race: BTreeMap<RaceLabel, usize>,
    pub negative_attribution: String,
}

impl FairnessReport {
    /// Aggregates per-race accuracies (percent) and pair counts.
    pub fn from_accuracies(acc: BTreeMap<RaceLabel, f64>, counts: BTreeMap<RaceLabel, usize>, threshold: f64) -> Self {
        let values: Vec<f64> = acc.values().copied().collect();
        let macro_avg = values.iter().sum::<f64>() / values.len().max(1) as f64;
        let total: usize = acc.keys().map(|r| counts.get(r).copied().unwrap_or(0)).sum();
        let weighted_avg = if total == 0 {
            macro_avg
        } else {
            acc.iter()
                .map(|(r, a)| a * counts.get(r).copied().unwrap_or(0) as f64)
                .sum::<f64>()
                / total as f64
        };
        FairnessReport {
            std: sample_std(&values),
            acc_per_race: acc,
            macro_avg,
            weighted_avg,
            threshold,
            n_pairs_per_race: counts,
            negative_attribution: NEGATIVE_ATTRIBUTION.to_string(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("race,accuracy,pairs\n");
        for (race, acc) in &self.acc_per_race {
            out.push_str(&format!("{race},{acc:.4},{}\n", self.n_pairs_per_race.get(race).copied().unwrap_or(0)));
        }
        out.push_str(&format!("macro_avg,{:.4},\nweighted_avg,{:.4},\nstd,{:.4},\n", self.macro_avg, self.weighted_avg, self.std));
        out
    }
}

/// Per-race accuracy at a fixed threshold. Races without pairs are left out
/// of every aggregate.
pub fn per_race_accuracy(pairs: &[ScoredPair], threshold: f64) -> Result<FairnessReport, MetricError> {
    if pairs.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut correct: BTreeMap<RaceLabel, usize> = BTreeMap::new();
    let mut counts: BTreeMap<RaceLabel, usize> = BTreeMap::new();
    for p in pairs {
        *counts.entry(p.race).or_default() += 1;
        if predict_kin(p.similarity, threshold) == p.is_kin {
            *correct.entry(p.race).or_default() += 1;
        }
    }
    for race in RaceLabel::ALL {
        if !counts.contains_key(&race) {
            warn!("no test pairs for {race}; std computed over the remaining races");
        }
    }
    let acc = counts
        .iter()
        .map(|(r, &n)| (*r, 100.0 * correct.get(r).copied().unwrap_or(0) as f64 / n as f64))
        .collect();
    Ok(FairnessReport::from_accuracies(acc, counts, threshold))
}

/// Angle between two vectors in degrees, in `[0, 180]`.
///
/// Uses `2 atan2(|u|v| - v|u||, |u|v| + v|u||)`, which equals the clamped
/// arccos of the cosine but stays exact near 0 and 180 degrees.
pub fn angle_deg(u: &[f64], v: &[f64]) -> f64 {
    let nu = crate::tensor::norm(u);
    let nv = crate::tensor::norm(v);
    if nu == 0.0 || nv == 0.0 {
        return if nu == nv { 0.0 } else { 90.0 };
    }
    let a: Vec<f64> = u.iter().zip(v).map(|(x, y)| x * nv - y * nu).collect();
    let b: Vec<f64> = u.iter().zip(v).map(|(x, y)| x * nv + y * nu).collect();
    (2.0 * crate::tensor::norm(&a).atan2(crate::tensor::norm(&b))).to_degrees()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyEmbeddings {
    pub family_id: String,
    pub race: RaceLabel,
    pub embeddings: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AngleReport {
    pub intra_per_race: BTreeMap<RaceLabel, f64>,
    pub inter_per_race: BTreeMap<RaceLabel, f64>,
    pub std_intra: f64,
    pub std_inter: f64,
}

/// Mean within-family and cross-family (same race) embedding angles per race.
pub fn intra_inter_angles(families: &[FamilyEmbeddings]) -> AngleReport {
    let mut intra: BTreeMap<RaceLabel, (f64, usize)> = BTreeMap::new();
    let mut inter: BTreeMap<RaceLabel, (f64, usize)> = BTreeMap::new();
    for (a, fa) in families.iter().enumerate() {
        for i in 0..fa.embeddings.len() {
            for j in i + 1..fa.embeddings.len() {
                let e = intra.entry(fa.race).or_default();
                e.0 += angle_deg(&fa.embeddings[i], &fa.embeddings[j]);
                e.1 += 1;
            }
        }
        for fb in families[a + 1..].iter().filter(|f| f.race == fa.race) {
            for u in &fa.embeddings {
                for v in &fb.embeddings {
                    let e = inter.entry(fa.race).or_default();
                    e.0 += angle_deg(u, v);
                    e.1 += 1;
                }
            }
        }
    }
    let mean = |m: BTreeMap<RaceLabel, (f64, usize)>| -> BTreeMap<RaceLabel, f64> {
        m.into_iter().map(|(r, (s, n))| (r, s / n as f64)).collect()
    };
    let (intra, inter) = (mean(intra), mean(inter));
    for race in intra.keys() {
        if inter.get(race).is_some_and(|&x| intra[race] > x) {
            log::info!("{race}: intra-family angle exceeds inter-family angle");
        }
    }
    AngleReport {
        std_intra: sample_std(&intra.values().copied().collect::<Vec<_>>()),
        std_inter: sample_std(&inter.values().copied().collect::<Vec<_>>()),
        intra_per_race: intra,
        inter_per_race: inter,
    }
}

/// Up to `per_race` randomly chosen families of each race.
pub fn sample_families(families: &[FamilyEmbeddings], per_race: usize, seed: u64) -> Vec<FamilyEmbeddings> {
    let mut rng = seed::rng(seed, "angles/families");
    let mut out = Vec::new();
    for race in RaceLabel::ALL {
        let mut of_race: Vec<&FamilyEmbeddings> = families.iter().filter(|f| f.race == race).collect();
        of_race.shuffle(&mut rng);
        out.extend(of_race.into_iter().take(per_race).cloned());
    }
    out
}

/// Training log entry written every `eval_every` iterations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub iteration: u64,
    pub l_fairness: f64,
    pub l_race: f64,
    pub l_total: f64,
    pub mean_bias: f64,
    pub val_accuracy_per_race: BTreeMap<RaceLabel, f64>,
    pub val_macro: f64,
    pub val_std: f64,
}

/// `(iteration, val_std)` in log order.
pub fn std_trajectory(log: &[TrainLogRecord]) -> Vec<(u64, f64)> {
    log.iter().map(|r| (r.iteration, r.val_std)).collect()
}

pub fn std_trajectory_csv(series: &[(u64, f64)]) -> String {
    let mut out = String::from("iteration,val_std\n");
    for (it, std) in series {
        out.push_str(&format!("{it},{std}\n"));
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub values: Vec<f64>,
    pub race: RaceLabel,
    pub family_id: String,
}

/// Picks up to `per_race` rows of each race (seeded), in race order.
pub fn sample_rows_per_race(rows: &[EmbeddingRow], per_race: usize, seed: u64) -> Vec<EmbeddingRow> {
    let mut rng = seed::rng(seed, "export/rows");
    let mut out = Vec::new();
    for race in RaceLabel::ALL {
        let mut idx: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].race == race).collect();
        idx.shuffle(&mut rng);
        idx.truncate(per_race);
        idx.sort_unstable();
        out.extend(idx.into_iter().map(|i| rows[i].clone()));
    }
    out
}

/// Tab-separated rows: embedding values (9 significant digits), race, family id.
pub fn export_embeddings(rows: &[EmbeddingRow], mut out: impl Write) -> Result<usize, MetricError> {
    for row in rows {
        let mut line = row.values.iter().map(|v| format!("{v:.8e}")).collect::<Vec<_>>().join("\t");
        line.push_str(&format!("\t{}\t{}\n", row.race, row.family_id));
        out.write_all(line.as_bytes())?;
    }
    Ok(rows.len())
}

/// Parses the format written by [`export_embeddings`].
pub fn parse_embeddings(input: impl BufRead) -> Result<Vec<EmbeddingRow>, MetricError> {
    let mut rows = Vec::new();
    for line in input.lines() {
        let line = line?;
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 3 {
            return Err(MetricError::Length(format!("row with {} columns", cols.len())));
        }
        let n = cols.len() - 2;
        let values = cols[..n]
            .iter()
            .map(|c| c.parse::<f64>().map_err(|e| MetricError::Length(e.to_string())))
            .collect::<Result<_, _>>()?;
        let race = serde_json::from_value(serde_json::Value::String(cols[n].to_string()))
            .map_err(|e| MetricError::Length(e.to_string()))?;
        rows.push(EmbeddingRow { values, race, family_id: cols[n + 1].to_string() });
    }
    Ok(rows)
}

/// Accuracy of a ridge least-squares linear probe (one-hot targets, bias
/// column) fit on `train` and scored on `test`.
pub fn linear_probe_accuracy(
    train: &[Vec<f64>],
    train_labels: &[usize],
    test: &[Vec<f64>],
    test_labels: &[usize],
    classes: usize,
    ridge: f64,
) -> Result<f64, MetricError> {
    if train.is_empty() || test.is_empty() {
        return Err(MetricError::Empty);
    }
    if train.len() != train_labels.len() || test.len() != test_labels.len() {
        return Err(MetricError::Length("probe features and labels differ in length".into()));
    }
    let d = train[0].len() + 1;
    let design = |rows: &[Vec<f64>]| {
        DMatrix::from_fn(rows.len(), d, |i, j| if j + 1 == d { 1.0 } else { rows[i][j] })
    };
    let x = design(train);
    let y = DMatrix::from_fn(train.len(), classes, |i, k| if train_labels[i] == k { 1.0 } else { 0.0 });
    let mut gram = x.transpose() * &x;
    for k in 0..d {
        gram[(k, k)] += ridge;
    }
    let rhs = x.transpose() * y;
    let w = gram
        .cholesky()
        .ok_or_else(|| MetricError::Length("probe normal equations not positive definite".into()))?
        .solve(&rhs);
    let scores = design(test) * w;
    let correct = (0..test.len())
        .filter(|&i| {
            let row = scores.row(i);
            let best = (0..classes).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            best == test_labels[i]
        })
        .count();
    Ok(correct as f64 / test.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use RaceLabel::*;

    fn report(values: [f64; 4]) -> FairnessReport {
        let acc = RaceLabel::ALL.iter().copied().zip(values).collect();
        let counts = RaceLabel::ALL.iter().map(|&r| (r, 100)).collect();
        FairnessReport::from_accuracies(acc, counts, 0.0)
    }

    #[test]
    fn table_rows_reproduce_std() {
        assert!((report([82.18, 83.71, 78.00, 80.70]).std - 2.43).abs() <= 0.01);
        assert!((report([81.28, 81.29, 80.83, 80.80]).std - 0.27).abs() <= 0.01);
        assert_eq!(report([80.0; 4]).std, 0.0);
    }

    #[test]
    fn separable_threshold() {
        let sims = [0.9, 0.8, 0.1, 0.2];
        let labels = [true, true, false, false];
        let t = select_threshold(&sims, &labels).unwrap();
        assert!(t > 0.2 && t < 0.8);
        assert_eq!(accuracy_at(&sims, &labels, t), 1.0);
    }

    #[test]
    fn degenerate_thresholds() {
        let sims = [0.5; 5];
        let labels = [true, true, true, false, false];
        let t = select_threshold(&sims, &labels).unwrap();
        assert_eq!(accuracy_at(&sims, &labels, t), 0.6);
        assert!(matches!(select_threshold(&sims, &[true; 5]), Err(MetricError::SingleClass)));
    }

    #[test]
    fn weighted_differs_from_macro() {
        let acc = BTreeMap::from([(African, 90.0), (Caucasian, 70.0)]);
        let counts = BTreeMap::from([(African, 10), (Caucasian, 90)]);
        let r = FairnessReport::from_accuracies(acc, counts, 0.0);
        assert_eq!(r.macro_avg, 80.0);
        assert!((r.weighted_avg - 72.0).abs() < 1e-12);
    }

    #[test]
    fn extreme_thresholds() {
        let pairs: Vec<ScoredPair> = [(0.3, true), (-0.2, false), (0.9, true), (0.1, false), (0.5, false)]
            .iter()
            .map(|&(similarity, is_kin)| ScoredPair { similarity, is_kin, race: Asian })
            .collect();
        assert_eq!(per_race_accuracy(&pairs, -1.0).unwrap().acc_per_race[&Asian], 40.0);
        assert_eq!(per_race_accuracy(&pairs, 1.0).unwrap().acc_per_race[&Asian], 60.0);
    }

    #[test]
    fn missing_race_is_omitted() {
        let pairs = vec![
            ScoredPair { similarity: 0.9, is_kin: true, race: Asian },
            ScoredPair { similarity: 0.1, is_kin: true, race: Indian },
        ];
        let r = per_race_accuracy(&pairs, 0.5).unwrap();
        assert_eq!(r.acc_per_race.len(), 2);
        assert!((r.std - sample_std(&[100.0, 0.0])).abs() < 1e-12);
    }

    #[test]
    fn angles_basic() {
        assert_eq!(angle_deg(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((angle_deg(&[1.0, 0.0], &[0.0, 3.0]) - 90.0).abs() < 1e-12);
        let fams = vec![
            FamilyEmbeddings { family_id: "a".into(), race: Asian, embeddings: vec![vec![1.0, 0.0], vec![2.0, 0.0]] },
            FamilyEmbeddings { family_id: "b".into(), race: Asian, embeddings: vec![vec![0.0, 1.0], vec![0.0, 5.0]] },
        ];
        let r = intra_inter_angles(&fams);
        assert!(r.intra_per_race[&Asian].abs() < 1e-12);
        assert!((r.inter_per_race[&Asian] - 90.0).abs() < 1e-12);
    }

    #[test]
    fn trajectory_in_order() {
        let rec = |iteration, val_std| TrainLogRecord {
            iteration,
            l_fairness: 1.0,
            l_race: 1.0,
            l_total: 2.0,
            mean_bias: 0.0,
            val_accuracy_per_race: BTreeMap::new(),
            val_macro: 50.0,
            val_std,
        };
        let log = vec![rec(10, 3.0), rec(20, 2.5), rec(30, 1.25)];
        assert_eq!(std_trajectory(&log), vec![(10, 3.0), (20, 2.5), (30, 1.25)]);
        assert!(std_trajectory(&[]).is_empty());
        assert_eq!(std_trajectory_csv(&std_trajectory(&log)).lines().count(), 4);
    }
}
