use crate::autograd::{Tape, Var};

use super::heads::linear;
use super::{Bound, ModelConfig};

/// Channel width of each stride-2 stage, doubling up to `width` at the last stage.
pub fn stage_widths(cfg: &ModelConfig) -> Vec<usize> {
    (0..cfg.backbone_stages)
        .map(|k| (cfg.width >> (cfg.backbone_stages - 1 - k)).max(8.min(cfg.width)))
        .collect()
}

/// Spatial-attention kernel: 7, or 3 on maps smaller than 7.
pub fn spatial_kernel(spatial: usize) -> usize {
    if spatial >= 7 {
        7
    } else {
        3
    }
}

/// Sigmoid gates produced inside a CBAM block.
#[derive(Clone, Copy, Debug)]
pub struct CbamGates {
    /// `[B, 1, 1, C]`.
    pub channel: Var,
    /// `[B, H, W, 1]`.
    pub spatial: Var,
}

/// Channel attention (shared MLP over average- and max-pooled descriptors)
/// followed by spatial attention (convolution over channel-wise mean and max).
pub fn cbam(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> (Var, CbamGates) {
    let shape = tape.shape(x).to_vec();
    let (b, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);

    let avg = tape.mean_axis(x, 1);
    let avg = tape.mean_axis(avg, 2);
    let max = tape.max_axis(x, 1);
    let max = tape.max_axis(max, 2);
    let branch = |tape: &mut Tape, d: Var| {
        let d = tape.reshape(d, &[b, c]);
        let hdn = linear(tape, p, &format!("{prefix}.mlp1"), d);
        let hdn = tape.relu(hdn);
        linear(tape, p, &format!("{prefix}.mlp2"), hdn)
    };
    let a = branch(tape, avg);
    let m = branch(tape, max);
    let logits = tape.add(a, m);
    let gate = tape.sigmoid(logits);
    let channel = tape.reshape(gate, &[b, 1, 1, c]);
    let x = tape.mul(x, channel);

    let mean_c = tape.mean_axis(x, 3);
    let max_c = tape.max_axis(x, 3);
    let desc = tape.concat_last(&[mean_c, max_c]);
    let k = tape.shape(p.var(&format!("{prefix}.spatial.w")))[0];
    let sw = p.var(&format!("{prefix}.spatial.w"));
    let sb = p.var(&format!("{prefix}.spatial.b"));
    let s = tape.conv2d(desc, sw, sb, 1, k / 2);
    let spatial = tape.sigmoid(s);
    debug_assert_eq!(tape.shape(spatial), &[b, h, w, 1]);
    let out = tape.mul(x, spatial);
    (out, CbamGates { channel, spatial })
}

/// Returns the last feature map `m` (`[B, H', W', C]`) and the embedding `e` (`[B, C]`).
pub fn backbone_forward(tape: &mut Tape, p: &Bound, cfg: &ModelConfig, images: Var) -> (Var, Var) {
    let stages = stage_widths(cfg).len();
    let mut x = images;
    for k in 0..stages {
        let w = p.var(&format!("backbone.stage{k}.conv.w"));
        let b = p.var(&format!("backbone.stage{k}.conv.b"));
        x = tape.conv2d(x, w, b, 2, 1);
        x = tape.relu(x);
        if cfg.cbam_in_backbone && k + 3 >= stages {
            x = cbam(tape, p, &format!("backbone.stage{k}.cbam"), x).0;
        }
    }
    let shape = tape.shape(x).to_vec();
    let pooled = tape.mean_axis(x, 1);
    let pooled = tape.mean_axis(pooled, 2);
    let pooled = tape.reshape(pooled, &[shape[0], shape[3]]);
    let e = linear(tape, p, "backbone.head", pooled);
    (x, e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modelcore::Model;
    use crate::tensor::Tensor;

    #[test]
    fn widths() {
        let cfg = ModelConfig::default();
        assert_eq!(stage_widths(&cfg), vec![16, 32, 64]);
        let full_size = ModelConfig { backbone_stages: 4, width: 512, ..cfg };
        assert_eq!(stage_widths(&full_size), vec![64, 128, 256, 512]);
    }

    #[test]
    fn half_gates_quarter_the_input() {
        let cfg = ModelConfig { width: 8, ..ModelConfig::default() };
        let mut model = Model::new(cfg).unwrap();
        for name in ["attention.cbam.mlp2.w", "attention.cbam.mlp2.b", "attention.cbam.spatial.w", "attention.cbam.spatial.b"] {
            model.params.get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let p = Bound::bind(&mut tape, &model.params);
        let input = Tensor::new(vec![1, 3, 3, 8], (0..72).map(|k| (k as f64 * 0.37).sin()).collect());
        let x = tape.leaf(input.clone());
        let (out, gates) = cbam(&mut tape, &p, "attention.cbam", x);
        assert!(tape.value(gates.channel).data().iter().all(|&g| g == 0.5));
        assert!(tape.value(gates.spatial).data().iter().all(|&g| g == 0.5));
        for (o, i) in tape.value(out).data().iter().zip(input.data()) {
            assert!((o - 0.25 * i).abs() < 1e-15);
        }
    }
}
