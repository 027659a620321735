//! Differentiable model components: a small convolutional backbone with
//! optional CBAM, the cross-image attention fusion module, the debias layer
//! and the race classifier behind an optional gradient reversal.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names. Forward passes
//! bind the store onto a [`Tape`] so that training and inference share one
//! code path.

mod attention;
mod backbone;
mod heads;

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::ModelError;
use crate::seed;
use crate::tensor::Tensor;

pub use attention::{attention_fuse, AttentionVars};
pub use backbone::{backbone_forward, cbam, spatial_kernel, stage_widths, CbamGates};
pub use heads::{debias_forward, linear, race_head, RACE_CLASSES};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Race branch trained normally.
    #[default]
    MultiTask,
    /// Race branch gradient reversed before it reaches the backbone.
    Adversarial,
}

/// How the backbone embedding `e` and the attended vector `c` are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// Elementwise product, dimension `C`.
    #[default]
    Product,
    /// `[e, c]`, dimension `2C`.
    Concat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: (usize, usize),
    pub in_channels: usize,
    pub backbone_stages: usize,
    pub width: usize,
    pub cbam_in_backbone: bool,
    pub cbam_reduction: usize,
    pub grl_lambda: f64,
    pub race_head_hidden: usize,
    pub mode: TrainMode,
    pub fusion: Fusion,
    /// Output width of the debias layer; 0 means "same as the fused width".
    pub debias_dim: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: (16, 16),
            in_channels: 3,
            backbone_stages: 3,
            width: 64,
            cbam_in_backbone: true,
            cbam_reduction: 8,
            grl_lambda: 1.0,
            race_head_hidden: 32,
            mode: TrainMode::MultiTask,
            fusion: Fusion::Product,
            debias_dim: 0,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.backbone_stages < 3 {
            return bad(format!("backbone_stages = {} (need >= 3)", self.backbone_stages));
        }
        if self.width == 0 || self.race_head_hidden == 0 || self.cbam_reduction == 0 || self.in_channels == 0 {
            return bad("width, race_head_hidden, cbam_reduction and in_channels must be positive".into());
        }
        if !(self.grl_lambda >= 0.0) {
            return bad(format!("grl_lambda = {} must be >= 0", self.grl_lambda));
        }
        let (h, w) = self.feature_size();
        if h == 0 || w == 0 {
            return bad(format!("{:?} too small for {} stages", self.image_size, self.backbone_stages));
        }
        Ok(())
    }

    /// Spatial size `(H', W')` of the backbone feature map.
    pub fn feature_size(&self) -> (usize, usize) {
        let mut hw = self.image_size;
        for _ in 0..self.backbone_stages {
            hw = (hw.0.div_ceil(2), hw.1.div_ceil(2));
        }
        if self.image_size.0 == 0 || self.image_size.1 == 0 {
            (0, 0)
        } else {
            hw
        }
    }

    pub fn fused_dim(&self) -> usize {
        match self.fusion {
            Fusion::Product => self.width,
            Fusion::Concat => 2 * self.width,
        }
    }

    pub fn debias_out(&self) -> usize {
        if self.debias_dim == 0 {
            self.fused_dim()
        } else {
            self.debias_dim
        }
    }

    pub fn cbam_hidden(&self, channels: usize) -> usize {
        (channels / self.cbam_reduction).max(1)
    }
}

/// Named parameter arrays in deterministic (sorted) order.
pub type ParamStore = BTreeMap<String, Tensor>;

/// Parameters bound as tape leaves.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn bind(tape: &mut Tape, params: &ParamStore) -> Self {
        let vars = params.iter().map(|(k, v)| (k.clone(), tape.leaf(v.clone()))).collect();
        Bound { vars }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Per-image backbone outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePack {
    /// `[H', W', C]`.
    pub m: Tensor,
    /// `[C]`.
    pub e: Tensor,
}

impl FeaturePack {
    pub fn is_finite(&self) -> bool {
        self.m.all_finite() && self.e.all_finite()
    }
}

/// Attention-module intermediates for one image of a pair.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionOutputs {
    pub s: Tensor,
    pub s_proj: Tensor,
    /// `[N, N]`, rows are softmax distributions over this image's positions.
    pub attention: Tensor,
    pub c: Tensor,
    pub fused: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

fn conv_init(rng: &mut impl Rng, k: usize, cin: usize, cout: usize) -> Tensor {
    let std = (2.0 / (k * k * cin) as f64).sqrt();
    let normal = Normal::new(0.0, std).unwrap();
    Tensor::new(vec![k, k, cin, cout], (0..k * k * cin * cout).map(|_| normal.sample(rng)).collect())
}

fn linear_init(rng: &mut impl Rng, din: usize, dout: usize) -> Tensor {
    let std = (1.0 / din as f64).sqrt();
    let normal = Normal::new(0.0, std).unwrap();
    Tensor::new(vec![din, dout], (0..din * dout).map(|_| normal.sample(rng)).collect())
}

fn add_linear(p: &mut ParamStore, rng: &mut impl Rng, name: &str, din: usize, dout: usize) {
    p.insert(format!("{name}.w"), linear_init(rng, din, dout));
    p.insert(format!("{name}.b"), Tensor::zeros(&[dout]));
}

fn add_cbam(p: &mut ParamStore, rng: &mut impl Rng, cfg: &ModelConfig, name: &str, channels: usize, spatial: usize) {
    let hidden = cfg.cbam_hidden(channels);
    add_linear(p, rng, &format!("{name}.mlp1"), channels, hidden);
    add_linear(p, rng, &format!("{name}.mlp2"), hidden, channels);
    let k = spatial_kernel(spatial);
    p.insert(format!("{name}.spatial.w"), conv_init(rng, k, 2, 1));
    p.insert(format!("{name}.spatial.b"), Tensor::zeros(&[1]));
}

impl Model {
    /// Seeded initialization: He-normal convolutions, `N(0, 1/fan_in)` linear layers, zero biases.
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = seed::rng(config.init_seed, "model/init");
        let mut p = ParamStore::new();
        let widths = stage_widths(&config);
        let mut cin = config.in_channels;
        let mut hw = config.image_size;
        for (k, &cout) in widths.iter().enumerate() {
            hw = (hw.0.div_ceil(2), hw.1.div_ceil(2));
            p.insert(format!("backbone.stage{k}.conv.w"), conv_init(&mut rng, 3, cin, cout));
            p.insert(format!("backbone.stage{k}.conv.b"), Tensor::zeros(&[cout]));
            if config.cbam_in_backbone && k + 3 >= widths.len() {
                add_cbam(&mut p, &mut rng, &config, &format!("backbone.stage{k}.cbam"), cout, hw.0.min(hw.1));
            }
            cin = cout;
        }
        let c = config.width;
        add_linear(&mut p, &mut rng, "backbone.head", c, c);
        add_linear(&mut p, &mut rng, "attention.proj", c, c);
        let (fh, fw) = config.feature_size();
        add_cbam(&mut p, &mut rng, &config, "attention.cbam", c, fh.min(fw));
        add_linear(&mut p, &mut rng, "debias", config.fused_dim(), config.debias_out());
        add_linear(&mut p, &mut rng, "race.fc1", c, config.race_head_hidden);
        add_linear(&mut p, &mut rng, "race.fc2", config.race_head_hidden, RACE_CLASSES);
        Ok(Model { config, params: p })
    }

    pub fn param(&self, name: &str) -> Result<&Tensor, ModelError> {
        self.params.get(name).ok_or_else(|| ModelError::MissingParam(name.into()))
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Parameter names and shapes, which do not depend on the training mode.
    pub fn signature(&self) -> Vec<(String, Vec<usize>)> {
        self.params.iter().map(|(k, v)| (k.clone(), v.shape().to_vec())).collect()
    }

    pub fn check_images(&self, images: &Tensor) -> Result<(), ModelError> {
        let (h, w) = self.config.image_size;
        let s = images.shape();
        if s.len() != 4 || s[0] == 0 || s[1] != h || s[2] != w || s[3] != self.config.in_channels {
            return Err(ModelError::Shape {
                got: s.to_vec(),
                expected: vec![s.first().copied().unwrap_or(1).max(1), h, w, self.config.in_channels],
            });
        }
        Ok(())
    }

    /// Backbone outputs for a `[B, H, W, C_in]` batch.
    pub fn features(&self, images: &Tensor) -> Result<Vec<FeaturePack>, ModelError> {
        self.check_images(images)?;
        let mut tape = Tape::new();
        let p = Bound::bind(&mut tape, &self.params);
        let x = tape.leaf(images.clone());
        let (m, e) = backbone_forward(&mut tape, &p, &self.config, x);
        let (mt, et) = (tape.value(m), tape.value(e));
        let (h, w, c) = (mt.shape()[1], mt.shape()[2], mt.shape()[3]);
        Ok((0..images.shape()[0])
            .map(|b| FeaturePack {
                m: Tensor::new(vec![h, w, c], mt.data()[b * h * w * c..(b + 1) * h * w * c].to_vec()),
                e: Tensor::new(vec![c], et.row(b).to_vec()),
            })
            .collect())
    }

    /// Attention fusion for a batch of pairs given their feature packs.
    pub fn attention(&self, first: &[FeaturePack], second: &[FeaturePack]) -> (Vec<AttentionOutputs>, Vec<AttentionOutputs>) {
        let mut tape = Tape::new();
        let p = Bound::bind(&mut tape, &self.params);
        let (m1, e1) = stack_packs(&mut tape, first);
        let (m2, e2) = stack_packs(&mut tape, second);
        let (a1, a2) = attention_fuse(&mut tape, &p, &self.config, (m1, e1), (m2, e2));
        (a1.collect(&tape), a2.collect(&tape))
    }

    /// Kinship similarity `cos(fused_1, fused_2)` for each pair.
    pub fn pair_similarities(&self, first: &[FeaturePack], second: &[FeaturePack]) -> Vec<f64> {
        let (a1, a2) = self.attention(first, second);
        a1.iter()
            .zip(&a2)
            .map(|(x, y)| crate::losses::cosine(x.fused.data(), y.fused.data()))
            .collect()
    }

    /// Debias layer applied to two fused vectors and their midpoint.
    pub fn debias(&self, f_i: &[f64], f_j: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>), ModelError> {
        let d = self.config.fused_dim();
        if f_i.len() != d || f_j.len() != d {
            return Err(ModelError::Shape { got: vec![f_i.len(), f_j.len()], expected: vec![d, d] });
        }
        let mut tape = Tape::new();
        let p = Bound::bind(&mut tape, &self.params);
        let fi = tape.leaf(Tensor::new(vec![1, d], f_i.to_vec()));
        let fj = tape.leaf(Tensor::new(vec![1, d], f_j.to_vec()));
        let (a, b, m) = debias_forward(&mut tape, &p, fi, fj);
        Ok((tape.value(a).data().to_vec(), tape.value(b).data().to_vec(), tape.value(m).data().to_vec()))
    }

    /// Race logits for a batch of `[B, C]` embeddings.
    pub fn race_logits(&self, embeddings: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let p = Bound::bind(&mut tape, &self.params);
        let e = tape.leaf(embeddings.clone());
        let l = race_head(&mut tape, &p, e);
        tape.value(l).clone()
    }
}

/// Stacks per-image packs into `[n, H', W', C]` and `[n, C]` leaves.
pub fn stack_packs(tape: &mut Tape, packs: &[FeaturePack]) -> (Var, Var) {
    let m: Vec<Tensor> = packs.iter().map(|p| p.m.clone()).collect();
    let e: Vec<Tensor> = packs.iter().map(|p| p.e.clone()).collect();
    (tape.leaf(Tensor::stack(&m)), tape.leaf(Tensor::stack(&e)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_scale_shapes() {
        let model = Model::new(ModelConfig::default()).unwrap();
        let images = Tensor::zeros(&[2, 16, 16, 3]);
        let packs = model.features(&images).unwrap();
        assert_eq!(packs.len(), 2);
        assert_eq!(packs[0].m.shape(), &[2, 2, 64]);
        assert_eq!(packs[0].e.shape(), &[64]);
        assert!(packs.iter().all(FeaturePack::is_finite));
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let model = Model::new(ModelConfig::default()).unwrap();
        assert!(matches!(model.features(&Tensor::zeros(&[1, 12, 16, 3])), Err(ModelError::Shape { .. })));
        assert!(matches!(model.features(&Tensor::zeros(&[0, 16, 16, 3])), Err(ModelError::Shape { .. })));
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig { backbone_stages: 2, ..ModelConfig::default() }.validate().is_err());
        assert!(ModelConfig { grl_lambda: -0.5, ..ModelConfig::default() }.validate().is_err());
    }

    #[test]
    fn zero_race_head_is_uniform() {
        let mut model = Model::new(ModelConfig::default()).unwrap();
        for name in ["race.fc1.w", "race.fc1.b", "race.fc2.w", "race.fc2.b"] {
            let t = model.params.get_mut(name).unwrap();
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let logits = model.race_logits(&Tensor::filled(&[3, 64], 0.7));
        assert_eq!(logits.shape(), &[3, 4]);
        let mut row = logits.row(0).to_vec();
        crate::autograd::softmax_in_place(&mut row);
        for p in row {
            assert!((p - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn debias_midpoint() {
        let mut model = Model::new(ModelConfig { width: 2, ..ModelConfig::default() }).unwrap();
        model.params.insert("debias.w".into(), Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let (a, b, m) = model.debias(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(a, [1.0, 0.0]);
        assert_eq!(b, [0.0, 1.0]);
        assert_eq!(m, [0.5, 0.5]);
        let (a, b, m) = model.debias(&[0.3, -0.2], &[0.3, -0.2]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, m);
    }
}
