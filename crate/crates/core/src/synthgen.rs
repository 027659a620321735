//! Synthetic kinship populations with separable family, race and noise factors.
//!
//! Every image is `family_signal * F(family) + race_signal * R(race) +
//! noise_sigma * N(0, 1)`, where the `F` and `R` patterns are seeded,
//! mutually orthogonal and scaled to unit RMS per pixel.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::manifest::{IdentityRecord, KinEdge, KinType, Manifest, RaceLabel, SourceRow, SourceTable};
use crate::seed;
use crate::tensor::{dot, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub families_per_race: BTreeMap<RaceLabel, usize>,
    pub members_per_family: usize,
    pub images_per_member: usize,
    pub image_size: (usize, usize),
    pub channels: usize,
    pub family_signal: f64,
    pub race_signal: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            families_per_race: BTreeMap::from([
                (RaceLabel::African, 4),
                (RaceLabel::Asian, 4),
                (RaceLabel::Caucasian, 16),
                (RaceLabel::Indian, 4),
            ]),
            members_per_family: 4,
            images_per_member: 4,
            image_size: (16, 16),
            channels: 3,
            family_signal: 0.3,
            race_signal: 0.5,
            noise_sigma: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: String| Err(ConfigError::Invalid(msg));
        let (h, w) = self.image_size;
        if h < 8 || w < 8 {
            return bad(format!("image_size {h}x{w} below 8x8"));
        }
        if self.channels != 3 {
            return bad(format!("channels must be 3, got {}", self.channels));
        }
        for (name, v) in [("family_signal", self.family_signal), ("race_signal", self.race_signal)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} outside [0, 1]"));
            }
        }
        if self.family_signal + self.race_signal > 1.0 + 1e-12 {
            return bad("family_signal + race_signal exceeds 1".into());
        }
        if !(self.noise_sigma >= 0.0) {
            return bad(format!("noise_sigma = {} must be >= 0", self.noise_sigma));
        }
        if self.members_per_family == 0 || self.images_per_member == 0 {
            return bad("members_per_family and images_per_member must be >= 1".into());
        }
        let patterns = self.total_families() + RaceLabel::ALL.len();
        if patterns > self.pixels() {
            return bad(format!("{patterns} orthogonal patterns do not fit in {} pixels", self.pixels()));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.image_size.0 * self.image_size.1 * self.channels
    }

    pub fn total_families(&self) -> usize {
        self.families_per_race.values().sum()
    }
}

/// Images keyed by reference string, all of the same `[H, W, C]` shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageStore {
    shape: [usize; 3],
    keys: Vec<String>,
    data: Vec<f64>,
    index: HashMap<String, usize>,
}

const STORE_MAGIC: &[u8; 8] = b"KINIMG01";

impl ImageStore {
    pub fn new(shape: [usize; 3]) -> Self {
        ImageStore { shape, keys: Vec::new(), data: Vec::new(), index: HashMap::new() }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    fn pixels(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn insert(&mut self, key: String, pixels: &[f64]) {
        assert_eq!(pixels.len(), self.pixels());
        assert!(!self.index.contains_key(&key), "duplicate image key {key}");
        self.index.insert(key.clone(), self.keys.len());
        self.keys.push(key);
        self.data.extend_from_slice(pixels);
    }

    pub fn get(&self, key: &str) -> Option<&[f64]> {
        let p = self.pixels();
        self.index.get(key).map(|&i| &self.data[i * p..(i + 1) * p])
    }

    /// Stacks the named images into a `[B, H, W, C]` batch.
    pub fn batch<S: AsRef<str>>(&self, keys: &[S]) -> Option<Tensor> {
        let mut data = Vec::with_capacity(keys.len() * self.pixels());
        for k in keys {
            data.extend_from_slice(self.get(k.as_ref())?);
        }
        let [h, w, c] = self.shape;
        Some(Tensor::new(vec![keys.len(), h, w, c], data))
    }

    /// Binary layout: magic, then little-endian `u64` count/H/W/C, then per
    /// image a `u32` key length, the UTF-8 key and `H*W*C` `f64` values.
    pub fn write_to(&self, path: &Path) -> io::Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        w.write_all(STORE_MAGIC)?;
        for v in [self.keys.len(), self.shape[0], self.shape[1], self.shape[2]] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        let p = self.pixels();
        for (i, key) in self.keys.iter().enumerate() {
            w.write_all(&(key.len() as u32).to_le_bytes())?;
            w.write_all(key.as_bytes())?;
            for v in &self.data[i * p..(i + 1) * p] {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    }

    pub fn read_from(path: &Path) -> io::Result<Self> {
        let mut r = BufReader::new(fs::File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != STORE_MAGIC {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "not an image store"));
        }
        let mut header = [0usize; 4];
        for h in header.iter_mut() {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            *h = u64::from_le_bytes(b) as usize;
        }
        let mut store = ImageStore::new([header[1], header[2], header[3]]);
        let p = store.pixels();
        let mut pixels = vec![0.0; p];
        for _ in 0..header[0] {
            let mut lb = [0u8; 4];
            r.read_exact(&mut lb)?;
            let mut kb = vec![0u8; u32::from_le_bytes(lb) as usize];
            r.read_exact(&mut kb)?;
            let key = String::from_utf8(kb).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
            for v in pixels.iter_mut() {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                *v = f64::from_le_bytes(b);
            }
            if store.index.contains_key(&key) {
                return Err(io::Error::new(io::ErrorKind::InvalidData, format!("duplicate key {key}")));
            }
            store.insert(key, &pixels);
        }
        Ok(store)
    }
}

#[derive(Clone, Debug)]
pub struct Population {
    pub manifest: Manifest,
    pub images: ImageStore,
    pub family_patterns: BTreeMap<String, Vec<f64>>,
    pub race_patterns: BTreeMap<RaceLabel, Vec<f64>>,
}

impl Population {
    /// The population as one source table with resolved races.
    pub fn to_source_table(&self, name: &str) -> SourceTable {
        let mut rows = self.manifest.to_rows();
        for r in &mut rows {
            r.source_dataset = None;
        }
        SourceTable { name: name.to_string(), rows }
    }

    /// Largest |<p, q>| / (|p| |q|) over distinct basis patterns.
    pub fn max_pattern_overlap(&self) -> f64 {
        let all: Vec<&Vec<f64>> = self.family_patterns.values().chain(self.race_patterns.values()).collect();
        let mut worst = 0.0f64;
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                let c = dot(all[i], all[j]) / (dot(all[i], all[i]) * dot(all[j], all[j])).sqrt();
                worst = worst.max(c.abs());
            }
        }
        worst
    }
}

/// Mutually orthogonal patterns with `|p|² = dim` (unit RMS), by modified Gram–Schmidt.
fn orthogonal_patterns(count: usize, dim: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for b in &basis {
            let proj = dot(&v, b);
            for (x, y) in v.iter_mut().zip(b) {
                *x -= proj * y;
            }
        }
        let n = dot(&v, &v).sqrt();
        if n < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= n);
        basis.push(v);
    }
    let scale = (dim as f64).sqrt();
    basis
        .into_iter()
        .map(|b| b.into_iter().map(|x| x * scale).collect())
        .collect()
}

/// Role of the `m`-th family member: father, mother, then alternating son and daughter.
fn role(m: usize) -> &'static str {
    match m {
        0 => "father",
        1 => "mother",
        m if m % 2 == 0 => "son",
        _ => "daughter",
    }
}

fn kin_type(parent: &str, child: &str) -> KinType {
    match (parent, child) {
        ("father", "son") => KinType::FS,
        ("father", _) => KinType::FD,
        (_, "son") => KinType::MS,
        _ => KinType::MD,
    }
}

pub fn make_population(cfg: &SynthConfig) -> Result<Population, ConfigError> {
    cfg.validate()?;
    let (h, w) = cfg.image_size;
    let dim = cfg.pixels();
    let mut pattern_rng = seed::rng(cfg.seed, "synth/patterns");
    let patterns = orthogonal_patterns(cfg.total_families() + 4, dim, &mut pattern_rng);
    let race_patterns: BTreeMap<RaceLabel, Vec<f64>> =
        RaceLabel::ALL.iter().copied().zip(patterns[..4].iter().cloned()).collect();

    let mut noise_rng = seed::rng(cfg.seed, "synth/noise");
    let mut images = ImageStore::new([h, w, cfg.channels]);
    let mut records = Vec::new();
    let mut edges = Vec::new();
    let mut family_patterns = BTreeMap::new();
    let mut next_pattern = 4;
    let mut pixels = vec![0.0; dim];
    for race in RaceLabel::ALL {
        let count = cfg.families_per_race.get(&race).copied().unwrap_or(0);
        for k in 0..count {
            let family_id = format!("{race}-{k:03}");
            let fam_pattern = patterns[next_pattern].clone();
            next_pattern += 1;
            let mut members = Vec::new();
            for m in 0..cfg.members_per_family {
                let identity_id = format!("{family_id}/{}{m}", role(m));
                let mut refs = Vec::with_capacity(cfg.images_per_member);
                for i in 0..cfg.images_per_member {
                    for (p, px) in pixels.iter_mut().enumerate() {
                        let eps: f64 = noise_rng.sample(StandardNormal);
                        *px = cfg.family_signal * fam_pattern[p]
                            + cfg.race_signal * race_patterns[&race][p]
                            + cfg.noise_sigma * eps;
                    }
                    let key = format!("{identity_id}/{i:02}");
                    images.insert(key.clone(), &pixels);
                    refs.push(key);
                }
                members.push((identity_id.clone(), role(m)));
                records.push(IdentityRecord {
                    identity_id,
                    family_id: family_id.clone(),
                    race,
                    images: refs,
                    source_dataset: "synthetic".into(),
                });
            }
            for (pid, prole) in members.iter().filter(|(_, r)| matches!(*r, "father" | "mother")) {
                for (cid, crole) in members.iter().filter(|(_, r)| matches!(*r, "son" | "daughter")) {
                    edges.push(KinEdge { parent_id: pid.clone(), child_id: cid.clone(), kin_type: kin_type(prole, crole) });
                }
            }
            family_patterns.insert(family_id, fam_pattern);
        }
    }
    Ok(Population { manifest: Manifest { records, edges }, images, family_patterns, race_patterns })
}

pub const IMAGES_FILE: &str = "images.bin";
pub const SOURCE_FILE: &str = "synthetic.jsonl";

/// Writes `images.bin`, `manifest.jsonl` and `sources/synthetic.jsonl` under `dir`.
pub fn write_population(dir: &Path, pop: &Population) -> io::Result<()> {
    fs::create_dir_all(dir.join("sources"))?;
    pop.images.write_to(&dir.join(IMAGES_FILE))?;
    crate::manifest::write_manifest(&dir.join(crate::manifest::MANIFEST_FILE), &pop.manifest)?;
    let rows: Vec<SourceRow> = pop.to_source_table("synthetic").rows;
    crate::manifest::write_jsonl(&dir.join("sources").join(SOURCE_FILE), &rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            families_per_race: BTreeMap::from([(RaceLabel::African, 1), (RaceLabel::Caucasian, 2)]),
            members_per_family: 3,
            images_per_member: 2,
            image_size: (8, 8),
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_and_orthogonal() {
        let a = make_population(&small()).unwrap();
        let b = make_population(&small()).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.manifest, b.manifest);
        assert!(a.max_pattern_overlap() < 1e-10);
        assert_eq!(a.images.len(), 3 * 3 * 2);
        // father, mother, son -> FS and MS
        assert_eq!(a.manifest.edges.len(), 3 * 2);
    }

    #[test]
    fn noiseless_family_images_identical() {
        let cfg = SynthConfig { noise_sigma: 0.0, race_signal: 0.0, ..small() };
        let pop = make_population(&cfg).unwrap();
        for rec in &pop.manifest.records {
            let fam_first = pop
                .manifest
                .records
                .iter()
                .find(|r| r.family_id == rec.family_id)
                .unwrap();
            let reference = pop.images.get(&fam_first.images[0]).unwrap();
            for img in &rec.images {
                assert_eq!(pop.images.get(img).unwrap(), reference);
            }
        }
    }

    #[test]
    fn invalid_configs() {
        assert!(SynthConfig { family_signal: 0.6, race_signal: 0.5, ..small() }.validate().is_err());
        assert!(SynthConfig { image_size: (7, 16), ..small() }.validate().is_err());
        assert!(SynthConfig { noise_sigma: -1.0, ..small() }.validate().is_err());
        assert!(SynthConfig::default().validate().is_ok());
    }

    #[test]
    fn store_round_trip() {
        let pop = make_population(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("images.bin");
        pop.images.write_to(&path).unwrap();
        assert_eq!(ImageStore::read_from(&path).unwrap(), pop.images);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(ImageStore::read_from(&path).is_err());
    }
}
