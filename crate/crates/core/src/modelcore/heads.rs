use crate::autograd::{Tape, Var};

use super::Bound;

pub const RACE_CLASSES: usize = 4;

/// `x · W + b` for `x` of shape `[N, D_in]`.
pub fn linear(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Var {
    let w = p.var(&format!("{prefix}.w"));
    let b = p.var(&format!("{prefix}.b"));
    let y = tape.matmul(x, w);
    tape.add(y, b)
}

/// Applies the shared affine debias map to `f_i`, `f_j` and their midpoint.
/// Returns `(M(f_i), M(f_j), M(f_m))`.
pub fn debias_forward(tape: &mut Tape, p: &Bound, f_i: Var, f_j: Var) -> (Var, Var, Var) {
    let sum = tape.add(f_i, f_j);
    let f_m = tape.scale(sum, 0.5);
    let mi = linear(tape, p, "debias", f_i);
    let mj = linear(tape, p, "debias", f_j);
    let mm = linear(tape, p, "debias", f_m);
    (mi, mj, mm)
}

/// Two-layer MLP producing unnormalized race logits `[B, 4]`.
pub fn race_head(tape: &mut Tape, p: &Bound, e: Var) -> Var {
    let h = linear(tape, p, "race.fc1", e);
    let h = tape.relu(h);
    linear(tape, p, "race.fc2", h)
}
