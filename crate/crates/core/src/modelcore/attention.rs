use crate::autograd::{Tape, Var};
use crate::tensor::Tensor;

use super::backbone::cbam;
use super::heads::linear;
use super::{AttentionOutputs, Bound, Fusion, ModelConfig};

/// Tape handles for the attention outputs of one side of a pair batch.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    /// `[n, C]` spatially averaged channel features.
    pub s: Var,
    /// `[n, C]`, `ReLU(1x1 conv(s))`.
    pub s_proj: Var,
    /// `[n, N, N]`: row `q` is a softmax over this image's positions, queried by
    /// position `q` of the other image.
    pub attention: Var,
    /// `[n, C]` attention-pooled CBAM features.
    pub c: Var,
    /// `[n, C]` (product) or `[n, 2C]` (concat).
    pub fused: Var,
}

impl AttentionVars {
    pub fn collect(&self, tape: &Tape) -> Vec<AttentionOutputs> {
        let n = tape.shape(self.s)[0];
        let row = |v: Var, i: usize| {
            let t = tape.value(v);
            let inner: usize = t.shape()[1..].iter().product();
            Tensor::new(t.shape()[1..].to_vec(), t.data()[i * inner..(i + 1) * inner].to_vec())
        };
        (0..n)
            .map(|i| AttentionOutputs {
                s: row(self.s, i),
                s_proj: row(self.s_proj, i),
                attention: row(self.attention, i),
                c: row(self.c, i),
                fused: row(self.fused, i),
            })
            .collect()
    }
}

/// Cross-image attention fusion over a batch of `n` pairs.
///
/// Each position's query is its feature vector gated by the image's projected
/// channel descriptor, `q_k = m_k ⊙ s_proj_k`. The map for image 1 is
/// `softmax_rows(q_2 · q_1ᵀ / sqrt(C))`; its column means weight the positions
/// of `CBAM(m_1)` to give `c_1`. Image 2 is handled symmetrically, so swapping
/// the inputs swaps the outputs.
pub fn attention_fuse(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    first: (Var, Var),
    second: (Var, Var),
) -> (AttentionVars, AttentionVars) {
    let shape = tape.shape(first.0).to_vec();
    let (n, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    let positions = h * w;

    let prep = |tape: &mut Tape, m: Var| {
        let s = tape.mean_axis(m, 1);
        let s = tape.mean_axis(s, 2);
        let s = tape.reshape(s, &[n, c]);
        let s_proj = linear(tape, p, "attention.proj", s);
        let s_proj = tape.relu(s_proj);
        let flat = tape.reshape(m, &[n, positions, c]);
        let gate = tape.reshape(s_proj, &[n, 1, c]);
        let q = tape.mul(flat, gate);
        (s, s_proj, q)
    };
    let (s1, sp1, q1) = prep(tape, first.0);
    let (s2, sp2, q2) = prep(tape, second.0);
    let scale = 1.0 / (c as f64).sqrt();

    let side = |tape: &mut Tape, m: Var, e: Var, q_self: Var, q_other: Var, s: Var, s_proj: Var| {
        let logits = tape.batch_matmul_nt(q_other, q_self);
        let logits = tape.scale(logits, scale);
        let attention = tape.softmax(logits);
        let weights = tape.mean_axis(attention, 1);
        let weights = tape.reshape(weights, &[n, positions, 1]);
        let (attended, _) = cbam(tape, p, "attention.cbam", m);
        let attended = tape.reshape(attended, &[n, positions, c]);
        let pooled = tape.mul(attended, weights);
        let pooled = tape.sum_axis(pooled, 1);
        let c_vec = tape.reshape(pooled, &[n, c]);
        let fused = match cfg.fusion {
            Fusion::Product => tape.mul(e, c_vec),
            Fusion::Concat => tape.concat_last(&[e, c_vec]),
        };
        AttentionVars { s, s_proj, attention, c: c_vec, fused }
    };
    let a1 = side(tape, first.0, first.1, q1, q2, s1, sp1);
    let a2 = side(tape, second.0, second.1, q2, q1, s2, sp2);
    (a1, a2)
}
