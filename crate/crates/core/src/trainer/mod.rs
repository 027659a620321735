//! The optimization loop: seeded batches of positive pairs with in-batch
//! negatives, the fair contrastive objective plus the race branch, SGD with
//! momentum and weight decay, periodic validation and best-model tracking.

mod checkpoint;
pub mod eval;
mod optim;

use std::collections::BTreeMap;

use log::{debug, info};
use rand::seq::IndexedRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{ConfigError, LossError, TrainError};
use crate::fairmetrics::TrainLogRecord;
use crate::losses::{SumConvention, DEFAULT_TAU};
use crate::manifest::PairSample;
use crate::modelcore::{
    attention_fuse, backbone_forward, debias_forward, race_head, Bound, Model, ModelConfig, TrainMode,
};
use crate::seed;
use crate::synthgen::ImageStore;
use crate::tensor::Tensor;

pub use checkpoint::{from_bytes, load_checkpoint, save_checkpoint, to_bytes, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use optim::Sgd;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Hard cap on iterations; 0 means "epochs only".
    pub max_iterations: u64,
    pub tau: f64,
    pub mode: TrainMode,
    pub grl_lambda: f64,
    pub seed: u64,
    pub eval_every: u64,
    pub race_loss_weight: f64,
    /// Subtract the debias-layer bias from the positive logits.
    pub use_debias: bool,
    pub convention: SumConvention,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-2,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 25,
            epochs: 10,
            max_iterations: 500,
            tau: DEFAULT_TAU,
            mode: TrainMode::MultiTask,
            grl_lambda: 1.0,
            seed: 0,
            eval_every: 50,
            race_loss_weight: 1.0,
            use_debias: true,
            convention: SumConvention::ExcludeSelf,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.batch_size < 2 {
            return bad(format!("batch_size = {} (contrastive loss needs at least 2)", self.batch_size));
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau = {} must be positive", self.tau));
        }
        if !(self.lr > 0.0) || !(self.momentum >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("lr must be positive; momentum and weight_decay non-negative".into());
        }
        if !(self.grl_lambda >= 0.0) || !(self.race_loss_weight >= 0.0) {
            return bad("grl_lambda and race_loss_weight must be non-negative".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1".into());
        }
        if self.epochs == 0 && self.max_iterations == 0 {
            return bad("either epochs or max_iterations must be positive".into());
        }
        Ok(())
    }
}

/// Handles to the scalar pieces of one batch objective.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveVars {
    pub l_fairness: Var,
    pub l_race: Var,
    pub l_total: Var,
    /// `[n]` per-anchor biases for the x and y directions, if debiasing is on.
    pub bias: Option<[Var; 2]>,
}

/// `b_i = mean_{j != i} eps(i, j)` computed on the tape from `[n, d]` fused vectors.
pub fn bias_graph(tape: &mut Tape, p: &Bound, fused: Var) -> Var {
    let n = tape.shape(fused)[0];
    if n < 2 {
        return tape.leaf(Tensor::zeros(&[n]));
    }
    let (mut ii, mut jj) = (Vec::new(), Vec::new());
    for i in 0..n {
        for j in (0..n).filter(|&j| j != i) {
            ii.push(i);
            jj.push(j);
        }
    }
    let fi = tape.select_rows(fused, &ii);
    let fj = tape.select_rows(fused, &jj);
    let (mi, mj, mm) = debias_forward(tape, p, fi, fj);
    let ci = tape.row_cosine(mm, mi);
    let cj = tape.row_cosine(mm, mj);
    let ci2 = tape.mul(ci, ci);
    let cj2 = tape.mul(cj, cj);
    let eps = tape.sub(ci2, cj2);
    let eps = tape.reshape(eps, &[n, n - 1]);
    let b = tape.mean_axis(eps, 1);
    tape.reshape(b, &[n])
}

/// Builds the full training objective for one batch of positive pairs.
///
/// `x` and `y` are `[n, H, W, C]` image batches; `races` holds the race index
/// of each x image followed by each y image.
pub fn batch_objective(
    tape: &mut Tape,
    p: &Bound,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    x: &Tensor,
    y: &Tensor,
    races: &[usize],
) -> ObjectiveVars {
    let n = x.shape()[0];
    let both = tape.leaf(Tensor::stack(&[x.clone(), y.clone()]).reshape(&{
        let mut s = x.shape().to_vec();
        s[0] = 2 * n;
        s
    }));
    let (m, e) = backbone_forward(tape, p, model_cfg, both);
    let first: Vec<usize> = (0..n).collect();
    let second: Vec<usize> = (n..2 * n).collect();
    let (mx, my) = (tape.select_rows(m, &first), tape.select_rows(m, &second));
    let (ex, ey) = (tape.select_rows(e, &first), tape.select_rows(e, &second));
    let (ax, ay) = attention_fuse(tape, p, model_cfg, (mx, ex), (my, ey));
    let (fx, fy) = (ax.fused, ay.fused);

    let cos_xy = tape.cosine_matrix(fx, fy);
    let cos_xx = tape.cosine_matrix(fx, fx);
    let cos_yy = tape.cosine_matrix(fy, fy);
    let bias = cfg.use_debias.then(|| [bias_graph(tape, p, fx), bias_graph(tape, p, fy)]);
    let l_fairness = tape.contrastive([cos_xy, cos_xx, cos_yy], bias, cfg.tau, cfg.convention);

    let race_in = match cfg.mode {
        TrainMode::MultiTask => e,
        TrainMode::Adversarial => tape.grad_reverse(e, cfg.grl_lambda),
    };
    let logits = race_head(tape, p, race_in);
    let l_race = tape.cross_entropy(logits, races);
    let weighted = tape.scale(l_race, cfg.race_loss_weight);
    let l_total = tape.add(l_fairness, weighted);
    ObjectiveVars { l_fairness, l_race, l_total, bias }
}

/// Images and pairs a training run draws from.
pub struct TrainData<'a> {
    pub images: &'a ImageStore,
    pub train: &'a [PairSample],
    pub val: &'a [PairSample],
}

/// Seeded batch sampler: each batch takes one random positive from each of
/// `batch_size` distinct random families (all families if there are fewer),
/// so in-batch negatives never share a family with the anchor.
pub struct BatchSampler {
    by_family: Vec<Vec<usize>>,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(pairs: &[PairSample], batch_size: usize, seed: u64) -> Result<Self, TrainError> {
        let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, p) in pairs.iter().enumerate().filter(|(_, p)| p.is_kin) {
            groups.entry(p.family_a.as_str()).or_default().push(i);
        }
        if groups.is_empty() {
            return Err(TrainError::EmptyTrainingSet);
        }
        if groups.len() < 2 {
            return Err(LossError::TooFewPairs(groups.len()).into());
        }
        Ok(BatchSampler {
            by_family: groups.into_values().collect(),
            batch_size: batch_size.min(pairs.len()),
            rng: seed::rng(seed, "train/batches"),
        })
    }

    pub fn positives(&self) -> usize {
        self.by_family.iter().map(Vec::len).sum()
    }

    /// Pairs per batch actually drawn.
    pub fn effective_batch(&self) -> usize {
        self.batch_size.min(self.by_family.len())
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let k = self.effective_batch();
        let families = rand::seq::index::sample(&mut self.rng, self.by_family.len(), k);
        families
            .iter()
            .map(|f| *self.by_family[f].choose(&mut self.rng).unwrap())
            .collect()
    }
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    /// Highest validation macro accuracy.
    pub acc_best: Model,
    /// Lowest validation cross-race std.
    pub std_best: Model,
    pub log: Vec<TrainLogRecord>,
    pub iterations: u64,
}

/// Total iterations for a run: epochs over the positives, capped by `max_iterations`.
pub fn planned_iterations(cfg: &TrainConfig, positives: usize, batch: usize) -> u64 {
    let per_epoch = positives.div_ceil(batch.max(1)) as u64;
    let by_epochs = per_epoch * cfg.epochs as u64;
    match (cfg.epochs, cfg.max_iterations) {
        (0, m) => m,
        (_, 0) => by_epochs,
        (_, m) => by_epochs.min(m),
    }
}

/// Trains a freshly initialized model.
pub fn train(
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
    data: &TrainData,
    on_record: impl FnMut(&TrainLogRecord),
) -> Result<TrainOutcome, TrainError> {
    let model = Model::new(model_cfg)?;
    train_from(model, cfg, data, on_record)
}

/// Continues training from the given weights.
pub fn train_from(
    mut model: Model,
    cfg: &TrainConfig,
    data: &TrainData,
    mut on_record: impl FnMut(&TrainLogRecord),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    model.config.mode = cfg.mode;
    model.config.grl_lambda = cfg.grl_lambda;
    let mut sampler = BatchSampler::new(data.train, cfg.batch_size, cfg.seed)?;
    let total = planned_iterations(cfg, sampler.positives(), sampler.effective_batch());
    info!(
        "training {:?}: {} positives, batch {}, {} iterations",
        cfg.mode,
        sampler.positives(),
        sampler.effective_batch(),
        total
    );
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut log = Vec::new();
    let mut acc_best: Option<(f64, Model)> = None;
    let mut std_best: Option<(f64, Model)> = None;

    for it in 1..=total {
        let batch = sampler.next_batch();
        let pairs: Vec<&PairSample> = batch.iter().map(|&i| &data.train[i]).collect();
        let fetch = |keys: Vec<&str>| {
            data.images.batch(&keys).ok_or_else(|| {
                TrainError::MissingImage(keys.iter().find(|k| data.images.get(k).is_none()).unwrap().to_string())
            })
        };
        let x = fetch(pairs.iter().map(|p| p.img_a.as_str()).collect())?;
        let y = fetch(pairs.iter().map(|p| p.img_b.as_str()).collect())?;
        let races: Vec<usize> = pairs
            .iter()
            .map(|p| p.race_a.index())
            .chain(pairs.iter().map(|p| p.race_b.index()))
            .collect();

        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &model.params);
        let obj = batch_objective(&mut tape, &bound, &model.config, cfg, &x, &y, &races);
        let l_fairness = tape.value(obj.l_fairness).item();
        let l_race = tape.value(obj.l_race).item();
        let l_total = tape.value(obj.l_total).item();
        if !l_total.is_finite() {
            return Err(TrainError::NonFinite { iteration: it, last_good: Box::new(model) });
        }
        let mean_bias = obj.bias.map_or(0.0, |[bx, by]| {
            let all: Vec<f64> = tape.value(bx).data().iter().chain(tape.value(by).data()).copied().collect();
            all.iter().sum::<f64>() / all.len() as f64
        });

        let grads = tape.backward(obj.l_total);
        let named: BTreeMap<String, Tensor> = bound
            .iter()
            .filter_map(|(name, &v)| grads.get(v).map(|g| (name.clone(), g.clone())))
            .collect();
        let before = model.clone();
        opt.step(&mut model.params, &named);
        if !model.params.values().all(Tensor::all_finite) {
            return Err(TrainError::NonFinite { iteration: it, last_good: Box::new(before) });
        }
        debug!("iter {it}: fair {l_fairness:.4} race {l_race:.4} bias {mean_bias:.5}");

        if it % cfg.eval_every == 0 || it == total {
            let report = eval::evaluate(&model, data.images, data.val, data.val)?;
            let record = TrainLogRecord {
                iteration: it,
                l_fairness,
                l_race,
                l_total,
                mean_bias,
                val_accuracy_per_race: report.acc_per_race.clone(),
                val_macro: report.macro_avg,
                val_std: report.std,
            };
            info!("iter {it}: loss {l_total:.4} val macro {:.2} std {:.3}", report.macro_avg, report.std);
            if acc_best.as_ref().is_none_or(|(a, _)| report.macro_avg > *a) {
                acc_best = Some((report.macro_avg, model.clone()));
            }
            if std_best.as_ref().is_none_or(|(s, _)| report.std < *s) {
                std_best = Some((report.std, model.clone()));
            }
            on_record(&record);
            log.push(record);
        }
    }
    let acc_best = acc_best.map_or_else(|| model.clone(), |(_, m)| m);
    let std_best = std_best.map_or_else(|| model.clone(), |(_, m)| m);
    Ok(TrainOutcome { model, acc_best, std_best, log, iterations: total })
}
