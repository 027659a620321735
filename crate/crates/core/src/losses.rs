//! Contrastive, fairness-aware contrastive and race classification losses,
//! together with their analytic gradients.
//!
//! A batch holds `n` positive pairs `(x_i, y_i)`. Each direction of the
//! symmetrized loss treats one side as anchors: for anchor `x_i` the
//! positive logit is `(cos(x_i, y_i) - b_i) / tau` and the negatives are
//! `cos(x_i, x_j)` and `cos(x_i, y_j)` for `j != i`.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::LossError;
use crate::tensor::{dot, norm, Tensor};

/// Norm below which a vector is treated as zero by [`cosine`].
pub const STABILITY_EPS: f64 = 1e-12;

pub const DEFAULT_TAU: f64 = 0.08;

static DEGENERATE_COSINES: AtomicU64 = AtomicU64::new(0);

/// Number of cosine evaluations where both inputs had (near) zero norm.
pub fn degenerate_cosine_count() -> u64 {
    DEGENERATE_COSINES.load(Ordering::Relaxed)
}

/// Cosine similarity, clamped to `[-1, 1]`. Two zero vectors give `0`.
pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let (nu, nv) = (norm(u), norm(v));
    if nu <= STABILITY_EPS && nv <= STABILITY_EPS {
        DEGENERATE_COSINES.fetch_add(1, Ordering::Relaxed);
        return 0.0;
    }
    (dot(u, v) / (nu * nv + STABILITY_EPS)).clamp(-1.0, 1.0)
}

/// Which terms enter the contrastive denominator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SumConvention {
    /// Positive term plus negatives `j != i` only.
    #[default]
    ExcludeSelf,
    /// Sum over all `j`, including the anchor's self-similarity `cos(x_i, x_i)`.
    Literal,
}

/// Similarity matrices for one batch of `n` positive pairs.
#[derive(Clone, Debug)]
pub struct SimMatrix {
    /// `cos(x_i, y_j)`; the diagonal holds the positive pairs.
    pub cos_xy: Tensor,
    pub cos_xx: Tensor,
    pub cos_yy: Tensor,
    pub tau: f64,
}

impl SimMatrix {
    pub fn n(&self) -> usize {
        self.cos_xy.shape()[0]
    }

    /// Builds the three matrices from anchor and counterpart embeddings.
    pub fn from_embeddings(xs: &[Vec<f64>], ys: &[Vec<f64>], tau: f64) -> Self {
        let mat = |a: &[Vec<f64>], b: &[Vec<f64>]| {
            let data = a
                .iter()
                .flat_map(|u| b.iter().map(move |v| cosine(u, v)))
                .collect();
            Tensor::new(vec![a.len(), b.len()], data)
        };
        SimMatrix {
            cos_xy: mat(xs, ys),
            cos_xx: mat(xs, xs),
            cos_yy: mat(ys, ys),
            tau,
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.tau > 0.0) {
            return Err(LossError::InvalidTemperature(self.tau));
        }
        let n = self.n();
        for m in [&self.cos_xy, &self.cos_xx, &self.cos_yy] {
            if m.shape() != [n, n] {
                return Err(LossError::Shape(format!(
                    "similarity matrix {:?}, expected [{n}, {n}]",
                    m.shape()
                )));
            }
        }
        if n < 2 {
            return Err(LossError::TooFewPairs(n));
        }
        Ok(())
    }
}

/// Pairwise bias estimates and their per-anchor means for one batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasVector {
    pub b: Vec<f64>,
    /// Row-major `n x n` matrix of `eps(i, j)`.
    pub eps_matrix: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_fairness: f64,
    pub l_race: f64,
    pub l_total: f64,
    pub bias_x: BiasVector,
    pub bias_y: BiasVector,
}

impl LossBreakdown {
    pub fn mean_bias(&self) -> f64 {
        let all: Vec<f64> = self.bias_x.b.iter().chain(&self.bias_y.b).copied().collect();
        if all.is_empty() {
            0.0
        } else {
            all.iter().sum::<f64>() / all.len() as f64
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Source {
    Xy,
    Xx,
    Yy,
}

/// One logit of an anchor's softmax: where its cosine lives and whether it is the positive.
#[derive(Clone, Copy, Debug)]
struct Term {
    source: Source,
    row: usize,
    col: usize,
    positive: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Direction {
    X,
    Y,
}

fn anchor_terms(n: usize, i: usize, dir: Direction, convention: SumConvention) -> Vec<Term> {
    let mut terms = Vec::with_capacity(2 * n);
    // (x_i, y_i) and (y_i, x_i) share cos_xy[i, i].
    terms.push(Term { source: Source::Xy, row: i, col: i, positive: true });
    for j in 0..n {
        let same_view = match dir {
            Direction::X => Source::Xx,
            Direction::Y => Source::Yy,
        };
        if j != i || convention == SumConvention::Literal {
            terms.push(Term { source: same_view, row: i, col: j, positive: false });
        }
        if j != i {
            let (row, col) = match dir {
                Direction::X => (i, j),
                Direction::Y => (j, i),
            };
            terms.push(Term { source: Source::Xy, row, col, positive: false });
        }
    }
    terms
}

fn lookup(s: &SimMatrix, t: &Term) -> f64 {
    let n = s.n();
    let m = match t.source {
        Source::Xy => &s.cos_xy,
        Source::Xx => &s.cos_xx,
        Source::Yy => &s.cos_yy,
    };
    m.data()[t.row * n + t.col]
}

/// Logits and softmax probabilities of one anchor's row.
fn anchor_softmax(s: &SimMatrix, terms: &[Term], bias: f64) -> (Vec<f64>, Vec<f64>) {
    let logits: Vec<f64> = terms
        .iter()
        .map(|t| {
            let c = lookup(s, t);
            if t.positive {
                (c - bias) / s.tau
            } else {
                c / s.tau
            }
        })
        .collect();
    let mut probs = logits.clone();
    crate::autograd::softmax_in_place(&mut probs);
    (logits, probs)
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Per-anchor losses `(L_c(x_i, y_i), L_c(y_i, x_i))` for every `i`.
pub fn anchor_losses(
    s: &SimMatrix,
    b_x: &[f64],
    b_y: &[f64],
    convention: SumConvention,
) -> (Vec<f64>, Vec<f64>) {
    let n = s.n();
    let per_dir = |dir: Direction, b: &[f64]| -> Vec<f64> {
        (0..n)
            .map(|i| {
                let terms = anchor_terms(n, i, dir, convention);
                let (logits, _) = anchor_softmax(s, &terms, b[i]);
                log_sum_exp(&logits) - logits[0]
            })
            .collect()
    };
    (per_dir(Direction::X, b_x), per_dir(Direction::Y, b_y))
}

/// Symmetrized loss `(1/2n) Σ_i [L_c(x_i, y_i) + L_c(y_i, x_i)]` with bias-shifted positives.
///
/// Callers are expected to have validated `s`; this is the unchecked core
/// shared by the autograd tape.
pub fn contrastive_loss(s: &SimMatrix, b_x: &[f64], b_y: &[f64], convention: SumConvention) -> f64 {
    let (lx, ly) = anchor_losses(s, b_x, b_y, convention);
    let n = s.n() as f64;
    (lx.iter().sum::<f64>() + ly.iter().sum::<f64>()) / (2.0 * n)
}

/// Supervised contrastive baseline (no bias term).
pub fn supcon_loss(s: &SimMatrix, convention: SumConvention) -> Result<f64, LossError> {
    s.validate()?;
    let zeros = vec![0.0; s.n()];
    Ok(contrastive_loss(s, &zeros, &zeros, convention))
}

/// Fairness-aware contrastive loss. `b_x` and `b_y` are the per-anchor
/// biases of the two anchor directions.
pub fn fair_contrastive_loss(s: &SimMatrix, b_x: &[f64], b_y: &[f64]) -> Result<f64, LossError> {
    s.validate()?;
    check_bias_len(s, b_x, b_y)?;
    Ok(contrastive_loss(s, b_x, b_y, SumConvention::ExcludeSelf))
}

fn check_bias_len(s: &SimMatrix, b_x: &[f64], b_y: &[f64]) -> Result<(), LossError> {
    if b_x.len() != s.n() || b_y.len() != s.n() {
        return Err(LossError::Shape(format!(
            "bias lengths {} / {} for batch of {}",
            b_x.len(),
            b_y.len(),
            s.n()
        )));
    }
    Ok(())
}

/// Gradients of the symmetrized loss with respect to every similarity entry and bias.
#[derive(Clone, Debug)]
pub struct SimGradients {
    pub d_cos_xy: Tensor,
    pub d_cos_xx: Tensor,
    pub d_cos_yy: Tensor,
    pub d_b_x: Vec<f64>,
    pub d_b_y: Vec<f64>,
}

/// Analytic gradients: the positive cosine receives `-(1/tau) Σ_{k != pos} P_k`,
/// every negative cosine receives `(1/tau) P_k`, each scaled by `1/2n`.
pub fn contrastive_grad(s: &SimMatrix, b_x: &[f64], b_y: &[f64], convention: SumConvention) -> SimGradients {
    let n = s.n();
    let mut d = [vec![0.0; n * n], vec![0.0; n * n], vec![0.0; n * n]];
    let mut d_b = [vec![0.0; n], vec![0.0; n]];
    let norm = 1.0 / (2.0 * n as f64);
    for (di, (dir, b)) in [(Direction::X, b_x), (Direction::Y, b_y)].into_iter().enumerate() {
        for i in 0..n {
            let terms = anchor_terms(n, i, dir, convention);
            let (_, probs) = anchor_softmax(s, &terms, b[i]);
            for (t, &p) in terms.iter().zip(&probs) {
                let slot = match t.source {
                    Source::Xy => 0,
                    Source::Xx => 1,
                    Source::Yy => 2,
                };
                let g = if t.positive {
                    // -(1/tau) Σ_{k≠pos} P_k
                    let neg_mass = 1.0 - p;
                    d_b[di][i] += norm * neg_mass / s.tau;
                    -neg_mass / s.tau
                } else {
                    p / s.tau
                };
                d[slot][t.row * n + t.col] += norm * g;
            }
        }
    }
    let [xy, xx, yy] = d;
    let [bx, by] = d_b;
    SimGradients {
        d_cos_xy: Tensor::new(vec![n, n], xy),
        d_cos_xx: Tensor::new(vec![n, n], xx),
        d_cos_yy: Tensor::new(vec![n, n], yy),
        d_b_x: bx,
        d_b_y: by,
    }
}

/// Analytic gradients of [`fair_contrastive_loss`] with respect to the similarity entries.
pub fn loss_grad_wrt_sims(s: &SimMatrix, b_x: &[f64], b_y: &[f64]) -> Result<SimGradients, LossError> {
    s.validate()?;
    check_bias_len(s, b_x, b_y)?;
    Ok(contrastive_grad(s, b_x, b_y, SumConvention::ExcludeSelf))
}

/// Row probabilities for the `x`-anchored direction with bias-shifted positives.
#[derive(Clone, Debug, PartialEq)]
pub struct PairProbabilities {
    /// `P(x_i, x_j)`, zero diagonal.
    pub xx: Tensor,
    /// `P(x_i, y_j)` for `j != i`, zero diagonal.
    pub xy: Tensor,
    /// Probability mass of the positive `(x_i, y_i)`.
    pub positive: Vec<f64>,
}

impl PairProbabilities {
    /// Total negative mass `Σ_{k != i} P_{i,k}` of row `i`.
    pub fn negative_mass(&self, i: usize) -> f64 {
        self.xx.row(i).iter().sum::<f64>() + self.xy.row(i).iter().sum::<f64>()
    }
}

/// Probabilities of each pair being recognized as positive; `b = 0` gives the unbiased form.
pub fn p_ij(s: &SimMatrix, b: &[f64]) -> Result<PairProbabilities, LossError> {
    s.validate()?;
    if b.len() != s.n() {
        return Err(LossError::Shape(format!("bias length {} for batch of {}", b.len(), s.n())));
    }
    let n = s.n();
    let mut xx = vec![0.0; n * n];
    let mut xy = vec![0.0; n * n];
    let mut positive = vec![0.0; n];
    for i in 0..n {
        let terms = anchor_terms(n, i, Direction::X, SumConvention::ExcludeSelf);
        let (_, probs) = anchor_softmax(s, &terms, b[i]);
        for (t, &p) in terms.iter().zip(&probs) {
            match (t.positive, t.source) {
                (true, _) => positive[i] = p,
                (false, Source::Xx) => xx[t.row * n + t.col] = p,
                (false, _) => xy[t.row * n + t.col] = p,
            }
        }
    }
    Ok(PairProbabilities {
        xx: Tensor::new(vec![n, n], xx),
        xy: Tensor::new(vec![n, n], xy),
        positive,
    })
}

/// `cos(M(f_m), M(f_i))² - cos(M(f_m), M(f_j))²`.
pub fn pair_bias(mf_m: &[f64], mf_i: &[f64], mf_j: &[f64]) -> f64 {
    cosine(mf_m, mf_i).powi(2) - cosine(mf_m, mf_j).powi(2)
}

/// Per-anchor mean of the off-diagonal entries of a row-major `n x n` bias matrix.
pub fn batch_bias(eps_matrix: &[f64], n: usize) -> Vec<f64> {
    assert_eq!(eps_matrix.len(), n * n);
    if n <= 1 {
        return vec![0.0; n];
    }
    (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| j != i)
                .map(|j| eps_matrix[i * n + j])
                .sum::<f64>()
                / (n - 1) as f64
        })
        .collect()
}

/// Builds the full bias matrix and its per-anchor means from debias-layer outputs.
///
/// `mapped[i]` is `M(f_i)` and `mapped_mid(i, j)` returns `M((f_i + f_j) / 2)`.
pub fn bias_from_debias(mapped: &[Vec<f64>], mapped_mid: impl Fn(usize, usize) -> Vec<f64>) -> BiasVector {
    let n = mapped.len();
    let mut eps = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                eps[i * n + j] = pair_bias(&mapped_mid(i, j), &mapped[i], &mapped[j]);
            }
        }
    }
    BiasVector { b: batch_bias(&eps, n), eps_matrix: eps }
}

/// Mean cross-entropy over `[batch, classes]` logits. Labels must be in range.
pub fn race_ce(logits: &Tensor, labels: &[usize]) -> Result<f64, LossError> {
    let classes = *logits.shape().last().unwrap_or(&0);
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return Err(LossError::Shape(format!(
            "logits {:?} for {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(LossError::LabelOutOfRange { label: bad, classes });
    }
    Ok(cross_entropy_raw(logits, labels))
}

pub(crate) fn cross_entropy_raw(logits: &Tensor, labels: &[usize]) -> f64 {
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(r, &l)| {
            let row = logits.row(r);
            log_sum_exp(row) - row[l]
        })
        .sum();
    total / labels.len().max(1) as f64
}

pub(crate) fn cross_entropy_grad(logits: &Tensor, labels: &[usize]) -> Tensor {
    let classes = *logits.shape().last().unwrap();
    let scale = 1.0 / labels.len().max(1) as f64;
    let mut data = logits.data().to_vec();
    for (r, row) in data.chunks_mut(classes).enumerate() {
        crate::autograd::softmax_in_place(row);
        row[labels[r]] -= 1.0;
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
    Tensor::new(logits.shape().to_vec(), data)
}

/// Weighted sum `l_fair + weight * l_race`; the default weight is 1.
pub fn total_loss_weighted(l_fair: f64, l_race: f64, race_weight: f64) -> Result<f64, LossError> {
    let total = l_fair + race_weight * l_race;
    if !total.is_finite() {
        return Err(LossError::NonFinite { l_fair, l_race });
    }
    Ok(total)
}

pub fn total_loss(l_fair: f64, l_race: f64) -> Result<f64, LossError> {
    total_loss_weighted(l_fair, l_race, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn uniform(n: usize, value: f64, tau: f64) -> SimMatrix {
        let m = Tensor::filled(&[n, n], value);
        SimMatrix { cos_xy: m.clone(), cos_xx: m.clone(), cos_yy: m, tau }
    }

    /// Two pairs with positives at `pos` and every cross term at `cross`.
    fn two_pair(pos: f64, cross: f64) -> SimMatrix {
        let xy = Tensor::new(vec![2, 2], vec![pos, cross, cross, pos]);
        let off = Tensor::new(vec![2, 2], vec![1.0, cross, cross, 1.0]);
        SimMatrix { cos_xy: xy, cos_xx: off.clone(), cos_yy: off, tau: DEFAULT_TAU }
    }

    #[test]
    fn cosine_cases() {
        assert_relative_eq!(cosine(&[2.0, 3.0], &[2.0, 3.0]), 1.0, epsilon = 1e-12);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 5.0]), 0.0);
        assert!((cosine(&[1.0, 1.0], &[1.0, 0.0]) - 0.7071).abs() < 1e-4);
    }

    #[test]
    fn zero_vectors_count_as_degenerate() {
        let before = degenerate_cosine_count();
        assert_eq!(cosine(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!(degenerate_cosine_count() > before);
        // one zero vector is not degenerate, just orthogonal
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
    }

    #[test]
    fn uniform_similarities_give_log_three() {
        let s = uniform(2, 0.3, 0.5);
        let l = supcon_loss(&s, SumConvention::ExcludeSelf).unwrap();
        assert_relative_eq!(l, -(1.0f64 / 3.0).ln(), max_relative = 1e-12);
    }

    #[test]
    fn separated_batch_has_vanishing_loss() {
        let s = two_pair(1.0, -1.0);
        let l = supcon_loss(&s, SumConvention::ExcludeSelf).unwrap();
        assert!(l < 1e-6, "{l}");
    }

    #[test]
    fn single_pair_is_rejected() {
        let s = uniform(1, 0.5, 0.08);
        assert!(matches!(supcon_loss(&s, SumConvention::ExcludeSelf), Err(LossError::TooFewPairs(1))));
        let bad = SimMatrix { tau: 0.0, ..uniform(3, 0.1, 1.0) };
        assert!(matches!(fair_contrastive_loss(&bad, &[0.0; 3], &[0.0; 3]), Err(LossError::InvalidTemperature(_))));
    }

    #[test]
    fn two_pair_hand_case_matches_frozen_oracle() {
        // Frozen from a 30-digit evaluation of the closed form with
        // cos(x_i, y_i) = 0.8, all cross terms 0.1, b = (0.05, -0.05) in both directions.
        let s = two_pair(0.8, 0.1);
        let l = fair_contrastive_loss(&s, &[0.05, -0.05], &[0.05, -0.05]).unwrap();
        assert_relative_eq!(l, 0.000380768164081025999, max_relative = 1e-9);
        let base = supcon_loss(&s, SumConvention::ExcludeSelf).unwrap();
        assert_relative_eq!(base, 0.000316872440856432976, max_relative = 1e-9);
    }

    #[test]
    fn literal_convention_adds_self_term() {
        let s = uniform(2, 0.0, 1.0);
        let literal = supcon_loss(&s, SumConvention::Literal).unwrap();
        let s_self = SimMatrix { cos_xx: Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]), cos_yy: Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]), ..s };
        let literal_self = supcon_loss(&s_self, SumConvention::Literal).unwrap();
        // all-zero cosines: 4 terms of e^0; with self term e^1 replacing one of them
        assert_relative_eq!(literal, 4f64.ln(), max_relative = 1e-12);
        assert_relative_eq!(literal_self, (3.0 + 1f64.exp()).ln(), max_relative = 1e-12);
    }

    #[test]
    fn pair_bias_hand_arithmetic() {
        assert_relative_eq!(pair_bias(&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]), 1.0, max_relative = 1e-9);
        assert_relative_eq!(pair_bias(&[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.0]), -1.0, max_relative = 1e-9);
        assert_eq!(pair_bias(&[0.3, 0.4], &[1.0, 2.0], &[1.0, 2.0]), 0.0);
    }

    #[test]
    fn batch_bias_three_by_three() {
        #[rustfmt::skip]
        let eps = [
            0.0, 0.2, -0.4,
            -0.2, 0.0, 0.6,
            0.4, -0.6, 0.0,
        ];
        let b = batch_bias(&eps, 3);
        assert_relative_eq!(b[0], -0.1, epsilon = 1e-15);
        assert_relative_eq!(b[1], 0.2, epsilon = 1e-15);
        assert_relative_eq!(b[2], -0.1, epsilon = 1e-15);
        assert!(b.iter().sum::<f64>().abs() < 1e-15);
        assert_eq!(batch_bias(&[0.0], 1), vec![0.0]);
        assert_eq!(batch_bias(&[0.0; 4], 2), vec![0.0, 0.0]);
    }

    #[test]
    fn race_ce_cases() {
        let uniform = Tensor::zeros(&[3, 4]);
        assert_relative_eq!(race_ce(&uniform, &[0, 1, 3]).unwrap(), 4f64.ln(), max_relative = 1e-12);
        let confident = Tensor::new(vec![1, 4], vec![20.0, 0.0, 0.0, 0.0]);
        let l = race_ce(&confident, &[0]).unwrap();
        assert!(l.is_finite() && l < 1e-3);
        // two samples by hand: logits (1, 0, 0, 0) label 0 and (0, 2, 0, 0) label 3
        let logits = Tensor::new(vec![2, 4], vec![1.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0]);
        let e = 1f64.exp();
        let e2 = 2f64.exp();
        let expected = ((e + 3.0).ln() - 1.0 + (e2 + 3.0).ln()) / 2.0;
        assert_relative_eq!(race_ce(&logits, &[0, 3]).unwrap(), expected, max_relative = 1e-12);
        assert!(matches!(race_ce(&logits, &[0, 4]), Err(LossError::LabelOutOfRange { label: 4, .. })));
    }

    #[test]
    fn total_loss_sums() {
        assert_eq!(total_loss(1.0, 0.5).unwrap(), 1.5);
        assert_eq!(total_loss(0.7, 0.0).unwrap(), 0.7);
        assert!(matches!(total_loss(f64::NAN, 0.0), Err(LossError::NonFinite { .. })));
        assert!(total_loss(f64::INFINITY, 1.0).is_err());
    }

    #[test]
    fn p_ij_rows_normalize_and_reduce() {
        let s = two_pair(0.6, 0.2);
        let p0 = p_ij(&s, &[0.0, 0.0]).unwrap();
        for i in 0..2 {
            assert_relative_eq!(p0.negative_mass(i) + p0.positive[i], 1.0, epsilon = 1e-12);
        }
        let p1 = p_ij(&s, &[0.1, 0.1]).unwrap();
        assert!(p1.xx.data()[1] > p0.xx.data()[1]);
        assert!(p1.positive[0] < p0.positive[0]);
    }
}
