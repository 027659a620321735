use kinfair::autograd::Tape;
use kinfair::modelcore::{Bound, Model, ModelConfig, ParamStore, TrainMode};
use kinfair::tensor::Tensor;
use kinfair::trainer::{self as checkpoint, TrainConfig};
use kinfair::trainer;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn small_config(mode: TrainMode) -> ModelConfig {
    ModelConfig { image_size: (8, 8), width: 8, race_head_hidden: 6, mode, init_seed: 4, ..ModelConfig::default() }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect())
}

fn objective(params: &ParamStore, model_cfg: &ModelConfig, cfg: &TrainConfig, x: &Tensor, y: &Tensor, races: &[usize]) -> (f64, Tape, Bound, kinfair::autograd::Var) {
    let mut tape = Tape::new();
    let p = Bound::bind(&mut tape, params);
    let vars = trainer::batch_objective(&mut tape, &p, model_cfg, cfg, x, y, races);
    let total = vars.l_total;
    (tape.value(total).data()[0], tape, p, total)
}

/// Central differences on a sample of entries of every parameter tensor.
/// The forward pass is identical in both modes, so finite differences of the
/// multi-task objective are the reference for multi-task gradients.
#[test]
fn full_objective_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model_cfg = small_config(TrainMode::MultiTask);
    let model = Model::new(model_cfg.clone()).unwrap();
    let n = 4;
    let x = random_tensor(&mut rng, &[n, 8, 8, 3]);
    let y = random_tensor(&mut rng, &[n, 8, 8, 3]);
    let races = [0, 1, 2, 3, 0, 1, 2, 3];
    let cfg = TrainConfig::default();
    let (_, tape, p, total) = objective(&model.params, &model_cfg, &cfg, &x, &y, &races);
    let grads = tape.backward(total);
    // The debias outputs are small at init, so eps is sharply curved in debias.b; keep the step tiny.
    let h = 1e-8;
    let (mut checked, mut bad) = (0, Vec::new());
    for (name, value) in &model.params {
        let analytic = grads.get_or_zeros(p.var(name), value);
        for _ in 0..3 {
            let k = rng.random_range(0..value.len());
            let mut plus = model.params.clone();
            plus.get_mut(name).unwrap().data_mut()[k] += h;
            let mut minus = model.params.clone();
            minus.get_mut(name).unwrap().data_mut()[k] -= h;
            let fd = (objective(&plus, &model_cfg, &cfg, &x, &y, &races).0
                - objective(&minus, &model_cfg, &cfg, &x, &y, &races).0)
                / (2.0 * h);
            let a = analytic.data()[k];
            checked += 1;
            if (a - fd).abs() > 1e-6 + 1e-4 * fd.abs() {
                bad.push(format!("{name}[{k}]: analytic {a:.3e} vs fd {fd:.3e}"));
            }
        }
    }
    // A ReLU kink inside the step can break a single sample; more than that is a bug.
    assert!(bad.len() <= 1, "{} of {checked} entries off:\n{}", bad.len(), bad.join("\n"));
}

#[test]
fn adversarial_mode_only_changes_backbone_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_tensor(&mut rng, &[3, 8, 8, 3]);
    let y = random_tensor(&mut rng, &[3, 8, 8, 3]);
    let races = [0, 2, 3, 0, 2, 3];
    let grads = |mode| {
        let model_cfg = small_config(mode);
        let model = Model::new(model_cfg.clone()).unwrap();
        let cfg = TrainConfig { mode, ..TrainConfig::default() };
        let (loss, tape, p, total) = objective(&model.params, &model_cfg, &cfg, &x, &y, &races);
        let g = tape.backward(total);
        let out: Vec<(String, Tensor)> =
            model.params.iter().map(|(k, v)| (k.clone(), g.get_or_zeros(p.var(k), v))).collect();
        (loss, out)
    };
    let (loss_mt, mt) = grads(TrainMode::MultiTask);
    let (loss_adv, adv) = grads(TrainMode::Adversarial);
    assert_eq!(loss_mt, loss_adv);
    let mut backbone_differs = false;
    for ((name, a), (_, b)) in mt.iter().zip(&adv) {
        if name.starts_with("race") {
            assert_eq!(a, b, "{name}");
        } else if name.starts_with("backbone") && a != b {
            backbone_differs = true;
        }
    }
    assert!(backbone_differs);
}

#[test]
fn conv2d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x0 = random_tensor(&mut rng, &[2, 5, 5, 2]);
    let w0 = random_tensor(&mut rng, &[3, 3, 2, 3]);
    let b0 = random_tensor(&mut rng, &[3]);
    let probe = random_tensor(&mut rng, &[2, 3, 3, 3]);
    let eval = |x: &Tensor, w: &Tensor, b: &Tensor| {
        let mut tape = Tape::new();
        let (xv, wv, bv, pv) = (tape.leaf(x.clone()), tape.leaf(w.clone()), tape.leaf(b.clone()), tape.leaf(probe.clone()));
        let y = tape.conv2d(xv, wv, bv, 2, 1);
        let z = tape.mul(y, pv);
        let s = tape.reshape(z, &[2 * 9 * 3]);
        let s = tape.sum_axis(s, 0);
        (tape.value(s).data()[0], tape, [xv, wv, bv], s)
    };
    let (_, tape, vars, out) = eval(&x0, &w0, &b0);
    let g = tape.backward(out);
    let h = 1e-6;
    for (slot, base) in [&x0, &w0, &b0].into_iter().enumerate() {
        let analytic = g.get(vars[slot]).unwrap();
        for k in 0..base.len() {
            let bump = |d: f64| {
                let mut t = [x0.clone(), w0.clone(), b0.clone()];
                t[slot].data_mut()[k] += d;
                eval(&t[0], &t[1], &t[2]).0
            };
            let fd = (bump(h) - bump(-h)) / (2.0 * h);
            approx::assert_abs_diff_eq!(analytic.data()[k], fd, epsilon = 1e-6);
        }
    }
}

#[test]
fn checkpoint_file_round_trip_preserves_scores() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt.json");
    let model = Model::new(small_config(TrainMode::Adversarial)).unwrap();
    checkpoint::save_checkpoint(&model, &path).unwrap();
    let back = checkpoint::load_checkpoint(&path).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let images = random_tensor(&mut rng, &[4, 8, 8, 3]);
    let fa = model.features(&images).unwrap();
    let fb = back.features(&images).unwrap();
    assert_eq!(model.pair_similarities(&fa[..2], &fa[2..]), back.pair_similarities(&fb[..2], &fb[2..]));
    assert!(checkpoint::load_checkpoint(&dir.path().join("missing.json")).is_err());
}
