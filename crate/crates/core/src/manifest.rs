//! Dataset manifests: race consensus, per-identity image caps, source
//! merging, family-disjoint splits and kin/non-kin pair generation.
//!
//! Files are JSON Lines. Source tables carry one identity per line with
//! either three annotator votes or a resolved race, plus explicit
//! `(parent_id, child_id, kin_type)` edges. `manifest.jsonl` uses the same
//! row layout, so a finalized manifest can be merged again unchanged.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::ManifestError;
use crate::seed;

pub const DEFAULT_IMAGE_CAP: usize = 30;
pub const DEFAULT_BALANCE_TOLERANCE: f64 = 0.05;
/// Default train/val/test family ratios. With the default synthetic
/// population (four families per minority race) this is the coarsest split
/// that puts every race into every split.
pub const DEFAULT_SPLIT_RATIOS: [f64; 3] = [0.5, 0.25, 0.25];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RaceLabel {
    African,
    Asian,
    Caucasian,
    Indian,
}

impl RaceLabel {
    pub const ALL: [RaceLabel; 4] = [
        RaceLabel::African,
        RaceLabel::Asian,
        RaceLabel::Caucasian,
        RaceLabel::Indian,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<RaceLabel> {
        Self::ALL.get(i).copied()
    }
}

impl fmt::Display for RaceLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum KinType {
    FS,
    FD,
    MS,
    MD,
}

impl KinType {
    pub const ALL: [KinType; 4] = [KinType::FS, KinType::FD, KinType::MS, KinType::MD];
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentityRecord {
    pub identity_id: String,
    pub family_id: String,
    pub race: RaceLabel,
    pub images: Vec<String>,
    pub source_dataset: String,
}

impl IdentityRecord {
    pub fn validate(&self) -> Result<(), ManifestError> {
        if self.images.is_empty() {
            return Err(ManifestError::NoImages(self.identity_id.clone()));
        }
        let mut seen = HashSet::new();
        for img in &self.images {
            if !seen.insert(img) {
                return Err(ManifestError::DuplicateImage(self.identity_id.clone(), img.clone()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KinEdge {
    pub parent_id: String,
    pub child_id: String,
    pub kin_type: KinType,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairSample {
    pub img_a: String,
    pub img_b: String,
    pub family_a: String,
    pub family_b: String,
    pub race_a: RaceLabel,
    pub race_b: RaceLabel,
    pub kin_type: Option<KinType>,
    pub is_kin: bool,
}

impl PairSample {
    /// Checks the kin/non-kin structural invariants.
    pub fn is_consistent(&self) -> bool {
        if self.is_kin {
            self.family_a == self.family_b && self.race_a == self.race_b && self.kin_type.is_some()
        } else {
            self.family_a != self.family_b
        }
    }
}

/// One row of a per-source identity table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceRow {
    pub identity_id: String,
    pub family_id: String,
    pub images: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotator_votes: Option<Vec<RaceLabel>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub race: Option<RaceLabel>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub kin_edges: Vec<KinEdge>,
    /// Overrides the table name as the record's source (set in finalized manifests).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_dataset: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SourceTable {
    pub name: String,
    pub rows: Vec<SourceRow>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Consensus {
    Agreed(RaceLabel),
    Reject,
}

/// Majority vote of three annotators; all-different votes are rejected.
pub fn consensus_race(votes: &[RaceLabel]) -> Result<Consensus, ManifestError> {
    if votes.len() != 3 {
        return Err(ManifestError::VoteCount(votes.len()));
    }
    let (a, b, c) = (votes[0], votes[1], votes[2]);
    Ok(if a == b || a == c {
        Consensus::Agreed(a)
    } else if b == c {
        Consensus::Agreed(b)
    } else {
        Consensus::Reject
    })
}

/// Keeps at most `cap` images, chosen uniformly with a seed derived from
/// `seed` and the identity id. Original image order is preserved.
pub fn cap_identity_images(rec: &IdentityRecord, cap: usize, seed: u64) -> Result<IdentityRecord, ManifestError> {
    if cap == 0 {
        return Err(ManifestError::BadCap);
    }
    if rec.images.len() <= cap {
        return Ok(rec.clone());
    }
    let mut rng = seed::rng(seed, &format!("cap/{}", rec.identity_id));
    let mut keep = index::sample(&mut rng, rec.images.len(), cap).into_vec();
    keep.sort_unstable();
    Ok(IdentityRecord {
        images: keep.into_iter().map(|i| rec.images[i].clone()).collect(),
        ..rec.clone()
    })
}

/// Per-source image counts by race, laid out like a dataset distribution table.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistributionTable {
    pub rows: Vec<(String, [u64; 4])>,
}

impl DistributionTable {
    pub fn race_totals(&self) -> [u64; 4] {
        let mut out = [0; 4];
        for (_, counts) in &self.rows {
            for (o, c) in out.iter_mut().zip(counts) {
                *o += c;
            }
        }
        out
    }

    pub fn total(&self) -> u64 {
        self.race_totals().iter().sum()
    }

    /// Race shares of all images, in percent.
    pub fn percents(&self) -> [f64; 4] {
        let total = self.total().max(1) as f64;
        self.race_totals().map(|c| 100.0 * c as f64 / total)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("source,African,Asian,Caucasian,Indian,sum\n");
        for (name, counts) in &self.rows {
            out.push_str(&format!(
                "{name},{},{},{},{},{}\n",
                counts[0],
                counts[1],
                counts[2],
                counts[3],
                counts.iter().sum::<u64>()
            ));
        }
        let totals = self.race_totals();
        out.push_str(&format!(
            "sum,{},{},{},{},{}\n",
            totals[0],
            totals[1],
            totals[2],
            totals[3],
            self.total()
        ));
        let p = self.percents();
        out.push_str(&format!(
            "percent,{:.2}%,{:.2}%,{:.2}%,{:.2}%,100%\n",
            p[0], p[1], p[2], p[3]
        ));
        out
    }
}

/// A finalized set of identities and the kin edges usable for positives.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<IdentityRecord>,
    pub edges: Vec<KinEdge>,
}

impl Manifest {
    pub fn identity(&self, id: &str) -> Option<&IdentityRecord> {
        self.records.iter().find(|r| r.identity_id == id)
    }

    pub fn families(&self) -> BTreeSet<String> {
        self.records.iter().map(|r| r.family_id.clone()).collect()
    }

    /// Most common race among a family's identities (ties go to the lower label).
    pub fn family_races(&self) -> BTreeMap<String, RaceLabel> {
        let mut counts: BTreeMap<&str, [usize; 4]> = BTreeMap::new();
        for r in &self.records {
            counts.entry(&r.family_id).or_default()[r.race.index()] += 1;
        }
        counts
            .into_iter()
            .map(|(fam, c)| {
                let best = (0..4).max_by_key(|&i| (c[i], std::cmp::Reverse(i))).unwrap();
                (fam.to_string(), RaceLabel::ALL[best])
            })
            .collect()
    }

    /// Rows in source-table layout; merging them again reproduces this manifest.
    pub fn to_rows(&self) -> Vec<SourceRow> {
        let mut by_parent: HashMap<&str, Vec<KinEdge>> = HashMap::new();
        for e in &self.edges {
            by_parent.entry(&e.parent_id).or_default().push(e.clone());
        }
        self.records
            .iter()
            .map(|r| SourceRow {
                identity_id: r.identity_id.clone(),
                family_id: r.family_id.clone(),
                images: r.images.clone(),
                annotator_votes: None,
                race: Some(r.race),
                kin_edges: by_parent.remove(r.identity_id.as_str()).unwrap_or_default(),
                source_dataset: Some(r.source_dataset.clone()),
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MergeOutput {
    pub manifest: Manifest,
    pub distribution: DistributionTable,
    /// Identities dropped because all three votes differed.
    pub rejected: Vec<String>,
    /// Families whose kin edges were dropped because parent and child races differ.
    pub mixed_race_families: Vec<String>,
}

/// Merges source tables into one manifest: resolves races by consensus,
/// drops rejected identities, caps images per identity, and removes the kin
/// edges of mixed-race families (their identities stay for negatives).
pub fn merge_sources(sources: &[SourceTable], cap: usize, seed: u64) -> Result<MergeOutput, ManifestError> {
    if cap == 0 {
        return Err(ManifestError::BadCap);
    }
    let mut seen: HashMap<&str, usize> = HashMap::new();
    let mut collisions = BTreeSet::new();
    for table in sources {
        for row in &table.rows {
            let count = seen.entry(&row.identity_id).or_default();
            *count += 1;
            if *count > 1 {
                collisions.insert(row.identity_id.clone());
            }
        }
    }
    if !collisions.is_empty() {
        return Err(ManifestError::DuplicateIdentities(collisions.into_iter().collect()));
    }

    let mut records = Vec::new();
    let mut rejected = Vec::new();
    let mut raw_edges = Vec::new();
    for table in sources {
        for row in &table.rows {
            raw_edges.extend(row.kin_edges.iter().cloned());
            let race = match (&row.race, &row.annotator_votes) {
                (Some(r), _) => *r,
                (None, Some(votes)) => match consensus_race(votes)? {
                    Consensus::Agreed(r) => r,
                    Consensus::Reject => {
                        rejected.push(row.identity_id.clone());
                        continue;
                    }
                },
                (None, None) => return Err(ManifestError::MissingRace(row.identity_id.clone())),
            };
            let rec = IdentityRecord {
                identity_id: row.identity_id.clone(),
                family_id: row.family_id.clone(),
                race,
                images: row.images.clone(),
                source_dataset: row.source_dataset.clone().unwrap_or_else(|| table.name.clone()),
            };
            rec.validate()?;
            records.push(cap_identity_images(&rec, cap, seed)?);
        }
    }

    let by_id: HashMap<&str, &IdentityRecord> = records.iter().map(|r| (r.identity_id.as_str(), r)).collect();
    let mut edges = BTreeSet::new();
    let mut mixed = BTreeSet::new();
    for e in raw_edges {
        let (Some(p), Some(c)) = (by_id.get(e.parent_id.as_str()), by_id.get(e.child_id.as_str())) else {
            continue;
        };
        if p.family_id != c.family_id {
            warn!("kin edge {} -> {} crosses families; ignored", e.parent_id, e.child_id);
            continue;
        }
        if p.race != c.race {
            mixed.insert(p.family_id.clone());
        }
        edges.insert(e);
    }
    let edges: Vec<KinEdge> = edges
        .into_iter()
        .filter(|e| !mixed.contains(&by_id[e.parent_id.as_str()].family_id))
        .collect();

    let mut distribution = DistributionTable::default();
    let mut row_of: HashMap<String, usize> = HashMap::new();
    for r in &records {
        let idx = *row_of.entry(r.source_dataset.clone()).or_insert_with(|| {
            distribution.rows.push((r.source_dataset.clone(), [0; 4]));
            distribution.rows.len() - 1
        });
        distribution.rows[idx].1[r.race.index()] += r.images.len() as u64;
    }

    Ok(MergeOutput {
        manifest: Manifest { records, edges },
        distribution,
        rejected,
        mixed_race_families: mixed.into_iter().collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Val, SplitName::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

/// Race proportions (image shares) per split versus the whole population.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitBalance {
    pub global: [f64; 4],
    pub per_split: [[f64; 4]; 3],
    /// Largest absolute deviation, as a fraction (0.05 = 5 percentage points).
    pub max_deviation: f64,
    pub tolerance: f64,
    pub within_tolerance: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilySplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
    pub balance: SplitBalance,
}

impl FamilySplit {
    pub fn families(&self, split: SplitName) -> &[String] {
        match split {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub split: FamilySplit,
    pub train: Vec<PairSample>,
    pub val: Vec<PairSample>,
    pub test: Vec<PairSample>,
}

impl SplitManifest {
    pub fn pairs(&self, split: SplitName) -> &[PairSample] {
        match split {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }
}

fn largest_remainder(total: usize, ratios: [f64; 3]) -> [usize; 3] {
    let ideal = ratios.map(|r| r * total as f64);
    let mut counts = ideal.map(|v| v.floor() as usize);
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| {
        let (ra, rb) = (ideal[a] - ideal[a].floor(), ideal[b] - ideal[b].floor());
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut left = total - counts.iter().sum::<usize>();
    for &k in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[k] += 1;
        left -= 1;
    }
    // every split gets at least one family
    for k in 0..3 {
        if counts[k] == 0 {
            let donor = (0..3).max_by_key(|&d| counts[d]).unwrap();
            counts[donor] -= 1;
            counts[k] += 1;
        }
    }
    counts
}

/// Partitions families (never identities) into train/val/test, stratified by race.
///
/// Families of each race are shuffled and given evenly spaced positions in
/// `[0, 1)`; all families are then ordered by position and cut at the global
/// split counts, so each race spreads over the splits in proportion.
pub fn split_by_family(
    manifest: &Manifest,
    ratios: [f64; 3],
    seed: u64,
    tolerance: f64,
) -> Result<FamilySplit, ManifestError> {
    if ratios.iter().any(|&r| !(r > 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(ManifestError::BadRatios(ratios));
    }
    let family_race = manifest.family_races();
    if family_race.len() < 3 {
        return Err(ManifestError::TooFewFamilies { families: family_race.len(), splits: 3 });
    }
    let mut rng = seed::rng(seed, "split");
    let mut keyed: Vec<(f64, RaceLabel, String)> = Vec::new();
    for race in RaceLabel::ALL {
        let mut fams: Vec<&String> = family_race.iter().filter(|(_, &r)| r == race).map(|(f, _)| f).collect();
        fams.shuffle(&mut rng);
        let size = fams.len() as f64;
        for (rank, fam) in fams.into_iter().enumerate() {
            keyed.push(((rank as f64 + 0.5) / size, race, fam.clone()));
        }
    }
    keyed.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let counts = largest_remainder(keyed.len(), ratios);
    let mut parts: [Vec<String>; 3] = Default::default();
    let mut it = keyed.into_iter().map(|(_, _, f)| f);
    for (k, &c) in counts.iter().enumerate() {
        parts[k].extend(it.by_ref().take(c));
        parts[k].sort();
    }
    let balance = split_balance(manifest, &parts, tolerance);
    if !balance.within_tolerance {
        warn!(
            "split race proportions deviate by {:.1} pp (tolerance {:.1} pp)",
            100.0 * balance.max_deviation,
            100.0 * tolerance
        );
    }
    let [train, val, test] = parts;
    Ok(FamilySplit { train, val, test, seed, balance })
}

fn split_balance(manifest: &Manifest, parts: &[Vec<String>; 3], tolerance: f64) -> SplitBalance {
    let mut split_of: HashMap<&str, usize> = HashMap::new();
    for (k, fams) in parts.iter().enumerate() {
        for f in fams {
            split_of.insert(f, k);
        }
    }
    let mut counts = [[0f64; 4]; 3];
    let mut global = [0f64; 4];
    for r in &manifest.records {
        let n = r.images.len() as f64;
        global[r.race.index()] += n;
        if let Some(&k) = split_of.get(r.family_id.as_str()) {
            counts[k][r.race.index()] += n;
        }
    }
    let normalize = |row: [f64; 4]| {
        let t: f64 = row.iter().sum();
        if t > 0.0 {
            row.map(|v| v / t)
        } else {
            row
        }
    };
    let global = normalize(global);
    let per_split = counts.map(normalize);
    let max_deviation = per_split
        .iter()
        .flat_map(|row| row.iter().zip(&global).map(|(a, b)| (a - b).abs()))
        .fold(0.0, f64::max);
    SplitBalance {
        global,
        per_split,
        max_deviation,
        tolerance,
        within_tolerance: max_deviation <= tolerance,
    }
}

/// Kin pairs from every edge inside `families` (all parent × child image
/// combinations) plus `neg_per_pos` uniformly drawn cross-family pairs per positive.
pub fn generate_pairs(manifest: &Manifest, families: &[String], neg_per_pos: usize, seed: u64) -> Vec<PairSample> {
    let fam_set: HashSet<&str> = families.iter().map(String::as_str).collect();
    let by_id: HashMap<&str, &IdentityRecord> =
        manifest.records.iter().map(|r| (r.identity_id.as_str(), r)).collect();
    let mut edges: Vec<&KinEdge> = manifest
        .edges
        .iter()
        .filter(|e| {
            by_id
                .get(e.parent_id.as_str())
                .is_some_and(|p| fam_set.contains(p.family_id.as_str()))
        })
        .collect();
    edges.sort_by(|a, b| {
        let fa = &by_id[a.parent_id.as_str()].family_id;
        let fb = &by_id[b.parent_id.as_str()].family_id;
        fa.cmp(fb).then(a.cmp(b))
    });

    let mut pairs = Vec::new();
    for e in edges {
        let (Some(p), Some(c)) = (by_id.get(e.parent_id.as_str()), by_id.get(e.child_id.as_str())) else {
            continue;
        };
        if p.family_id != c.family_id || p.race != c.race {
            continue;
        }
        for a in &p.images {
            for b in &c.images {
                pairs.push(PairSample {
                    img_a: a.clone(),
                    img_b: b.clone(),
                    family_a: p.family_id.clone(),
                    family_b: c.family_id.clone(),
                    race_a: p.race,
                    race_b: c.race,
                    kin_type: Some(e.kin_type),
                    is_kin: true,
                });
            }
        }
    }

    let members: Vec<&IdentityRecord> = manifest
        .records
        .iter()
        .filter(|r| fam_set.contains(r.family_id.as_str()))
        .collect();
    let distinct_families = members.iter().map(|r| &r.family_id).collect::<HashSet<_>>().len();
    let wanted = pairs.len() * neg_per_pos;
    if distinct_families < 2 {
        if wanted > 0 {
            warn!("split has a single family; no negatives generated");
        }
        return pairs;
    }
    let mut rng = seed::rng(seed, "negatives");
    for _ in 0..wanted {
        let (a, b) = loop {
            let a = members[rng.random_range(0..members.len())];
            let b = members[rng.random_range(0..members.len())];
            if a.family_id != b.family_id {
                break (a, b);
            }
        };
        pairs.push(PairSample {
            img_a: a.images[rng.random_range(0..a.images.len())].clone(),
            img_b: b.images[rng.random_range(0..b.images.len())].clone(),
            family_a: a.family_id.clone(),
            family_b: b.family_id.clone(),
            race_a: a.race,
            race_b: b.race,
            kin_type: None,
            is_kin: false,
        });
    }
    pairs
}

/// Splits families and generates the pairs of every split.
pub fn build_split_manifest(
    manifest: &Manifest,
    ratios: [f64; 3],
    neg_per_pos: usize,
    seed: u64,
    tolerance: f64,
) -> Result<SplitManifest, ManifestError> {
    let split = split_by_family(manifest, ratios, seed, tolerance)?;
    let pairs = |name: SplitName| {
        generate_pairs(
            manifest,
            split.families(name),
            neg_per_pos,
            seed::derive_seed(seed, &format!("pairs/{}", name.as_str())),
        )
    };
    Ok(SplitManifest {
        train: pairs(SplitName::Train),
        val: pairs(SplitName::Val),
        test: pairs(SplitName::Test),
        split,
    })
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), std::io::Error> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, ManifestError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| ManifestError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Reads every `*.jsonl` file of a directory as a source table named after its stem.
pub fn read_source_dir(dir: &Path) -> Result<Vec<SourceTable>, ManifestError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            Ok(SourceTable {
                name: p.file_stem().unwrap().to_string_lossy().into_owned(),
                rows: read_jsonl(&p)?,
            })
        })
        .collect()
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const DISTRIBUTION_FILE: &str = "distribution.csv";
pub const SPLITS_FILE: &str = "splits.json";

pub fn pairs_file(split: SplitName) -> String {
    format!("pairs_{}.jsonl", split.as_str())
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<(), std::io::Error> {
    write_jsonl(path, &manifest.to_rows())
}

/// Reads a finalized `manifest.jsonl`.
pub fn read_manifest(path: &Path) -> Result<Manifest, ManifestError> {
    let rows: Vec<SourceRow> = read_jsonl(path)?;
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let out = merge_sources(&[SourceTable { name, rows }], usize::MAX, 0)?;
    Ok(out.manifest)
}

/// Writes `manifest.jsonl`, `distribution.csv`, `splits.json` and `pairs_{train,val,test}.jsonl`.
pub fn write_outputs(dir: &Path, merged: &MergeOutput, splits: &SplitManifest) -> Result<(), std::io::Error> {
    fs::create_dir_all(dir)?;
    write_manifest(&dir.join(MANIFEST_FILE), &merged.manifest)?;
    fs::write(dir.join(DISTRIBUTION_FILE), merged.distribution.to_csv())?;
    fs::write(dir.join(SPLITS_FILE), serde_json::to_string_pretty(&splits.split)? + "\n")?;
    for name in SplitName::ALL {
        write_jsonl(&dir.join(pairs_file(name)), splits.pairs(name))?;
    }
    Ok(())
}

pub fn read_pairs(dir: &Path, split: SplitName) -> Result<Vec<PairSample>, ManifestError> {
    read_jsonl(&dir.join(pairs_file(split)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use RaceLabel::*;

    fn row(id: &str, fam: &str, n: usize, votes: [RaceLabel; 3]) -> SourceRow {
        SourceRow {
            identity_id: id.into(),
            family_id: fam.into(),
            images: (0..n).map(|k| format!("{id}/{k}.png")).collect(),
            annotator_votes: Some(votes.to_vec()),
            race: None,
            kin_edges: vec![],
            source_dataset: None,
        }
    }

    #[test]
    fn consensus_examples() {
        assert_eq!(consensus_race(&[Asian, Asian, Caucasian]).unwrap(), Consensus::Agreed(Asian));
        assert_eq!(consensus_race(&[Indian, Indian, Indian]).unwrap(), Consensus::Agreed(Indian));
        assert_eq!(consensus_race(&[Asian, African, Indian]).unwrap(), Consensus::Reject);
        assert!(matches!(consensus_race(&[Asian, Asian]), Err(ManifestError::VoteCount(2))));
    }

    #[test]
    fn capping() {
        let rec = IdentityRecord {
            identity_id: "p1".into(),
            family_id: "f1".into(),
            race: Asian,
            images: (0..45).map(|k| format!("img{k}")).collect(),
            source_dataset: "s".into(),
        };
        let a = cap_identity_images(&rec, 30, 9).unwrap();
        let b = cap_identity_images(&rec, 30, 9).unwrap();
        assert_eq!(a.images.len(), 30);
        assert_eq!(a, b);
        assert!(a.validate().is_ok());
        let small = IdentityRecord { images: rec.images[..12].to_vec(), ..rec.clone() };
        assert_eq!(cap_identity_images(&small, 30, 9).unwrap(), small);
        assert!(cap_identity_images(&rec, 0, 1).is_err());
    }

    #[test]
    fn rejects_disagreeing_identity() {
        let mut rows = vec![
            row("a1", "fa", 3, [Asian, Asian, Asian]),
            row("a2", "fa", 2, [Asian, Asian, Indian]),
            row("b1", "fb", 2, [African, Asian, Indian]),
            row("b2", "fb", 4, [African, African, Caucasian]),
            row("c1", "fc", 1, [Caucasian, Indian, Caucasian]),
        ];
        rows[0].kin_edges.push(KinEdge { parent_id: "a1".into(), child_id: "a2".into(), kin_type: KinType::FS });
        let out = merge_sources(&[SourceTable { name: "src".into(), rows }], 30, 0).unwrap();
        let ids: Vec<_> = out.manifest.records.iter().map(|r| r.identity_id.as_str()).collect();
        assert_eq!(ids, ["a1", "a2", "b2", "c1"]);
        assert_eq!(out.rejected, ["b1"]);
        assert_eq!(out.manifest.edges.len(), 1);
        assert_eq!(out.distribution.rows, vec![("src".to_string(), [4, 5, 1, 0])]);
    }

    #[test]
    fn duplicate_ids_are_listed() {
        let t1 = SourceTable { name: "one".into(), rows: vec![row("x", "f", 1, [Asian; 3]), row("y", "f", 1, [Asian; 3])] };
        let t2 = SourceTable { name: "two".into(), rows: vec![row("y", "g", 1, [Asian; 3]), row("x", "g", 1, [Asian; 3])] };
        match merge_sources(&[t1, t2], 30, 0) {
            Err(ManifestError::DuplicateIdentities(ids)) => assert_eq!(ids, ["x", "y"]),
            other => panic!("expected duplicate error, got {other:?}"),
        }
    }

    #[test]
    fn mixed_race_family_keeps_identities_but_no_edges() {
        let mut rows = vec![row("p", "f", 2, [Asian; 3]), row("c", "f", 2, [Caucasian; 3])];
        rows[0].kin_edges.push(KinEdge { parent_id: "p".into(), child_id: "c".into(), kin_type: KinType::MD });
        let out = merge_sources(&[SourceTable { name: "s".into(), rows }], 30, 0).unwrap();
        assert_eq!(out.manifest.records.len(), 2);
        assert!(out.manifest.edges.is_empty());
        assert_eq!(out.mixed_race_families, ["f"]);
    }

    #[test]
    fn father_son_cross_product() {
        let mut rows = vec![row("dad", "f", 2, [Asian; 3]), row("son", "f", 2, [Asian; 3])];
        rows[0].kin_edges.push(KinEdge { parent_id: "dad".into(), child_id: "son".into(), kin_type: KinType::FS });
        let m = merge_sources(&[SourceTable { name: "s".into(), rows }], 30, 0).unwrap().manifest;
        let pairs = generate_pairs(&m, &["f".to_string()], 1, 3);
        assert_eq!(pairs.len(), 4);
        assert!(pairs.iter().all(|p| p.is_kin && p.kin_type == Some(KinType::FS) && p.is_consistent()));
    }

    #[test]
    fn largest_remainder_counts() {
        assert_eq!(largest_remainder(100, [0.7, 0.15, 0.15]), [70, 15, 15]);
        assert_eq!(largest_remainder(3, [0.7, 0.15, 0.15]), [1, 1, 1]);
        assert_eq!(largest_remainder(10, [0.6, 0.3, 0.1]), [6, 3, 1]);
    }

    #[test]
    fn split_needs_three_families() {
        let rows = vec![row("a", "f1", 1, [Asian; 3]), row("b", "f2", 1, [Asian; 3])];
        let m = merge_sources(&[SourceTable { name: "s".into(), rows }], 30, 0).unwrap().manifest;
        assert!(matches!(
            split_by_family(&m, [0.7, 0.15, 0.15], 0, 0.05),
            Err(ManifestError::TooFewFamilies { families: 2, .. })
        ));
        assert!(matches!(split_by_family(&m, [0.5, 0.5, 0.1], 0, 0.05), Err(ManifestError::BadRatios(_))));
    }

    #[test]
    fn distribution_csv_layout() {
        let table = DistributionTable { rows: vec![("A".into(), [1, 2, 3, 4]), ("B".into(), [0, 0, 10, 0])] };
        let csv = table.to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "source,African,Asian,Caucasian,Indian,sum");
        assert_eq!(lines[1], "A,1,2,3,4,10");
        assert_eq!(lines[3], "sum,1,2,13,4,20");
        assert_eq!(lines[4], "percent,5.00%,10.00%,65.00%,20.00%,100%");
    }
}
