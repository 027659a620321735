//! A small reverse-mode tape over [`Tensor`] values.
//!
//! Every operation records its inputs and its forward value; `backward`
//! walks the tape in reverse and accumulates gradients. Shapes follow NHWC
//! for feature maps and `[rows, features]` for matrices.

use crate::losses::{self, SimMatrix, SumConvention};
use crate::tensor::{axis_split, broadcast_index_map, broadcast_shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(Binary, Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Reshape(Var),
    MatMul(Var, Var),
    BatchMatMulNT(Var, Var),
    Sum(Var, usize),
    Mean(Var, usize),
    Max(Var, usize, Vec<usize>),
    ConcatLast(Vec<Var>),
    Softmax(Var),
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    SelectRows(Var, Vec<usize>),
    CosineMatrix(Var, Var),
    RowCosine(Var, Var),
    GradReverse(Var, f64),
    CrossEntropy(Var, Vec<usize>),
    Contrastive { sims: [Var; 3], bias: Option<[Var; 2]>, tau: f64, convention: SumConvention },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients(Vec<Option<Tensor>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` did not influence the output.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const COS_FLOOR: f64 = 1e-12;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(ta.shape(), tb.shape()).unwrap_or_else(|| {
            panic!("cannot broadcast {:?} with {:?}", ta.shape(), tb.shape())
        });
        let data = if ta.shape() == tb.shape() {
            ta.data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| apply(kind, x, y))
                .collect()
        } else {
            let ma = broadcast_index_map(ta.shape(), &shape);
            let mb = broadcast_index_map(tb.shape(), &shape);
            ma.iter()
                .zip(&mb)
                .map(|(&i, &j)| apply(kind, ta.data()[i], tb.data()[j]))
                .collect()
        };
        self.push(Tensor::new(shape, data), Op::Binary(kind, a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|v| v * factor);
        self.push(value, Op::Scale(a, factor))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self.value(a).clone().reshape(shape);
        self.push(value, Op::Reshape(a))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let (k2, n) = (tb.shape()[0], tb.shape()[1]);
        assert_eq!(k, k2, "matmul inner dims {:?} x {:?}", ta.shape(), tb.shape());
        let out = matmul_raw(ta.data(), tb.data(), m, k, n);
        self.push(Tensor::new(vec![m, n], out), Op::MatMul(a, b))
    }

    /// `[b, m, k] x [b, n, k] -> [b, m, n]`, i.e. `A · Bᵀ` per batch entry.
    pub fn batch_matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (batch, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        let (batch2, n, k2) = (tb.shape()[0], tb.shape()[1], tb.shape()[2]);
        assert_eq!((batch, k), (batch2, k2));
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let ab = &ta.data()[bi * m * k..(bi + 1) * m * k];
            let bb = &tb.data()[bi * n * k..(bi + 1) * n * k];
            for i in 0..m {
                for j in 0..n {
                    out[bi * m * n + i * n + j] = crate::tensor::dot(
                        &ab[i * k..(i + 1) * k],
                        &bb[j * k..(j + 1) * k],
                    );
                }
            }
        }
        self.push(Tensor::new(vec![batch, m, n], out), Op::BatchMatMulNT(a, b))
    }

    /// Sum over `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Var {
        let value = reduce(self.value(a), axis, |s| s.iter().sum());
        self.push(value, Op::Sum(a, axis))
    }

    /// Mean over `axis`, keeping it with extent 1.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Var {
        let value = reduce(self.value(a), axis, |s| s.iter().sum::<f64>() / s.len() as f64);
        self.push(value, Op::Mean(a, axis))
    }

    /// Max over `axis`, keeping it with extent 1. Ties route the gradient to the first maximum.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Var {
        let t = self.value(a);
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = f64::NEG_INFINITY;
                let mut best_k = 0;
                for k in 0..len {
                    let v = t.data()[(o * len + k) * inner + i];
                    if v > best {
                        best = v;
                        best_k = k;
                    }
                }
                data[o * inner + i] = best;
                arg[o * inner + i] = best_k;
            }
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = 1;
        self.push(Tensor::new(shape, data), Op::Max(a, axis, arg))
    }

    /// Concatenation along the last axis; all other extents must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Var {
        let lead = self.value(parts[0]).shape()[..self.value(parts[0]).rank() - 1].to_vec();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let s = self.value(p).shape();
                assert_eq!(&s[..s.len() - 1], lead.as_slice(), "concat shape mismatch");
                s[s.len() - 1]
            })
            .collect();
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        self.push(Tensor::new(shape, data), Op::ConcatLast(parts.to_vec()))
    }

    /// Softmax over the last axis, stabilized by per-row max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let cols = *t.shape().last().unwrap();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let value = Tensor::new(t.shape().to_vec(), data);
        self.push(value, Op::Softmax(a))
    }

    /// NHWC convolution. `w` is `[k, k, c_in, c_out]`, `b` is `[c_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let value = conv2d_forward(self.value(x), self.value(w), self.value(b), stride, pad);
        self.push(value, Op::Conv2d { x, w, b, stride, pad })
    }

    /// Rows `indices` of a tensor viewed as `[rows, ...]`.
    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let value = self.value(a).select_rows(indices);
        self.push(value, Op::SelectRows(a, indices.to_vec()))
    }

    /// Pairwise cosine similarities of the rows: `[n, d] x [m, d] -> [n, m]`.
    pub fn cosine_matrix(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, m) = (ta.rows(), tb.rows());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] = losses::cosine(ta.row(i), tb.row(j));
            }
        }
        self.push(Tensor::new(vec![n, m], out), Op::CosineMatrix(a, b))
    }

    /// Cosine similarity of matching rows: `[n, d] x [n, d] -> [n]`.
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape());
        let out = (0..ta.rows()).map(|i| losses::cosine(ta.row(i), tb.row(i))).collect();
        self.push(Tensor::new(vec![ta.rows()], out), Op::RowCosine(a, b))
    }

    /// Identity forward; multiplies the incoming gradient by `-lambda` on the way back.
    pub fn grad_reverse(&mut self, a: Var, lambda: f64) -> Var {
        let value = self.value(a).clone();
        self.push(value, Op::GradReverse(a, lambda))
    }

    /// Mean cross-entropy of `[batch, classes]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let value = losses::cross_entropy_raw(self.value(logits), labels);
        self.push(Tensor::scalar(value), Op::CrossEntropy(logits, labels.to_vec()))
    }

    /// Symmetrized contrastive loss over similarity matrices `[cos_xy, cos_xx, cos_yy]`,
    /// with optional per-anchor bias vectors `[b_x, b_y]` shifting the positive logits.
    pub fn contrastive(
        &mut self,
        sims: [Var; 3],
        bias: Option<[Var; 2]>,
        tau: f64,
        convention: SumConvention,
    ) -> Var {
        let s = self.sim_matrix(sims, tau);
        let (bx, by) = self.bias_vectors(bias, s.n());
        let value = losses::contrastive_loss(&s, &bx, &by, convention);
        self.push(Tensor::scalar(value), Op::Contrastive { sims, bias, tau, convention })
    }

    fn sim_matrix(&self, sims: [Var; 3], tau: f64) -> SimMatrix {
        SimMatrix {
            cos_xy: self.value(sims[0]).clone(),
            cos_xx: self.value(sims[1]).clone(),
            cos_yy: self.value(sims[2]).clone(),
            tau,
        }
    }

    fn bias_vectors(&self, bias: Option<[Var; 2]>, n: usize) -> (Vec<f64>, Vec<f64>) {
        match bias {
            Some([bx, by]) => (self.value(bx).data().to_vec(), self.value(by).data().to_vec()),
            None => (vec![0.0; n], vec![0.0; n]),
        }
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(Tensor::filled(self.value(output).shape(), 1.0));
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients(grads)
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (ga, gb) = match kind {
                    Binary::Add => (g.clone(), g.clone()),
                    Binary::Sub => (g.clone(), g.map(|v| -v)),
                    Binary::Mul => {
                        let ma = broadcast_index_map(ta.shape(), out.shape());
                        let mb = broadcast_index_map(tb.shape(), out.shape());
                        let ga: Vec<f64> = (0..g.len()).map(|k| g.data()[k] * tb.data()[mb[k]]).collect();
                        let gb: Vec<f64> = (0..g.len()).map(|k| g.data()[k] * ta.data()[ma[k]]).collect();
                        (
                            Tensor::new(out.shape().to_vec(), ga),
                            Tensor::new(out.shape().to_vec(), gb),
                        )
                    }
                };
                accumulate(grads, *a, unbroadcast(&ga, ta.shape()));
                accumulate(grads, *b, unbroadcast(&gb, tb.shape()));
            }
            Op::Scale(a, f) => accumulate(grads, *a, g.map(|v| v * f)),
            Op::Relu(a) => {
                let x = self.value(*a);
                let data = g.data().iter().zip(x.data()).map(|(&g, &x)| if x > 0.0 { g } else { 0.0 }).collect();
                accumulate(grads, *a, Tensor::new(x.shape().to_vec(), data));
            }
            Op::Sigmoid(a) => {
                let data = g.data().iter().zip(out.data()).map(|(&g, &y)| g * y * (1.0 - y)).collect();
                accumulate(grads, *a, Tensor::new(out.shape().to_vec(), data));
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                accumulate(grads, *a, g.clone().reshape(&shape));
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                // dA = G Bᵀ, dB = Aᵀ G
                let mut ga = vec![0.0; m * k];
                let mut gb = vec![0.0; k * n];
                for i in 0..m {
                    for j in 0..n {
                        let gij = g.data()[i * n + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for p in 0..k {
                            ga[i * k + p] += gij * tb.data()[p * n + j];
                            gb[p * n + j] += gij * ta.data()[i * k + p];
                        }
                    }
                }
                accumulate(grads, *a, Tensor::new(vec![m, k], ga));
                accumulate(grads, *b, Tensor::new(vec![k, n], gb));
            }
            Op::BatchMatMulNT(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (batch, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let n = tb.shape()[1];
                let mut ga = vec![0.0; batch * m * k];
                let mut gb = vec![0.0; batch * n * k];
                for bi in 0..batch {
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g.data()[bi * m * n + i * n + j];
                            for p in 0..k {
                                ga[(bi * m + i) * k + p] += gij * tb.data()[(bi * n + j) * k + p];
                                gb[(bi * n + j) * k + p] += gij * ta.data()[(bi * m + i) * k + p];
                            }
                        }
                    }
                }
                accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), ga));
                accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), gb));
            }
            Op::Sum(a, axis) | Op::Mean(a, axis) => {
                let x = self.value(*a);
                let (outer, len, inner) = axis_split(x.shape(), *axis);
                let factor = if matches!(node.op, Op::Mean(..)) { 1.0 / len as f64 } else { 1.0 };
                let mut data = vec![0.0; x.len()];
                for o in 0..outer {
                    for k in 0..len {
                        for i in 0..inner {
                            data[(o * len + k) * inner + i] = g.data()[o * inner + i] * factor;
                        }
                    }
                }
                accumulate(grads, *a, Tensor::new(x.shape().to_vec(), data));
            }
            Op::Max(a, axis, arg) => {
                let x = self.value(*a);
                let (outer, len, inner) = axis_split(x.shape(), *axis);
                let mut data = vec![0.0; x.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let k = arg[o * inner + i];
                        data[(o * len + k) * inner + i] = g.data()[o * inner + i];
                    }
                }
                accumulate(grads, *a, Tensor::new(x.shape().to_vec(), data));
            }
            Op::ConcatLast(parts) => {
                let total = *out.shape().last().unwrap();
                let rows = out.len() / total.max(1);
                let mut offset = 0;
                for &p in parts {
                    let shape = self.value(p).shape().to_vec();
                    let w = *shape.last().unwrap();
                    let mut data = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        data.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                    }
                    accumulate(grads, p, Tensor::new(shape, data));
                    offset += w;
                }
            }
            Op::Softmax(a) => {
                let cols = *out.shape().last().unwrap();
                let mut data = vec![0.0; out.len()];
                for ((gr, yr), dr) in g
                    .data()
                    .chunks(cols)
                    .zip(out.data().chunks(cols))
                    .zip(data.chunks_mut(cols))
                {
                    let inner = crate::tensor::dot(gr, yr);
                    for k in 0..cols {
                        dr[k] = yr[k] * (gr[k] - inner);
                    }
                }
                accumulate(grads, *a, Tensor::new(out.shape().to_vec(), data));
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (gx, gw, gb) = conv2d_backward(self.value(*x), self.value(*w), g, *stride, *pad);
                accumulate(grads, *x, gx);
                accumulate(grads, *w, gw);
                accumulate(grads, *b, gb);
            }
            Op::SelectRows(a, indices) => {
                let x = self.value(*a);
                let inner: usize = x.shape()[1..].iter().product();
                let mut data = vec![0.0; x.len()];
                for (r, &i) in indices.iter().enumerate() {
                    for c in 0..inner {
                        data[i * inner + c] += g.data()[r * inner + c];
                    }
                }
                accumulate(grads, *a, Tensor::new(x.shape().to_vec(), data));
            }
            Op::CosineMatrix(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, m, d) = (ta.rows(), tb.rows(), *ta.shape().last().unwrap());
                let mut ga = vec![0.0; ta.len()];
                let mut gb = vec![0.0; tb.len()];
                for i in 0..n {
                    for j in 0..m {
                        let gij = g.data()[i * m + j];
                        if gij == 0.0 {
                            continue;
                        }
                        cosine_grad_into(
                            ta.row(i),
                            tb.row(j),
                            gij,
                            &mut ga[i * d..(i + 1) * d],
                            &mut gb[j * d..(j + 1) * d],
                        );
                    }
                }
                accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), ga));
                accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), gb));
            }
            Op::RowCosine(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let d = *ta.shape().last().unwrap();
                let mut ga = vec![0.0; ta.len()];
                let mut gb = vec![0.0; tb.len()];
                for i in 0..ta.rows() {
                    cosine_grad_into(
                        ta.row(i),
                        tb.row(i),
                        g.data()[i],
                        &mut ga[i * d..(i + 1) * d],
                        &mut gb[i * d..(i + 1) * d],
                    );
                }
                accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), ga));
                accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), gb));
            }
            Op::GradReverse(a, lambda) => accumulate(grads, *a, g.map(|v| -lambda * v)),
            Op::CrossEntropy(logits, labels) => {
                let grad = losses::cross_entropy_grad(self.value(*logits), labels);
                accumulate(grads, *logits, grad.map(|v| v * g.item()));
            }
            Op::Contrastive { sims, bias, tau, convention } => {
                let s = self.sim_matrix(*sims, *tau);
                let (bx, by) = self.bias_vectors(*bias, s.n());
                let sg = losses::contrastive_grad(&s, &bx, &by, *convention);
                let scale = g.item();
                accumulate(grads, sims[0], sg.d_cos_xy.map(|v| v * scale));
                accumulate(grads, sims[1], sg.d_cos_xx.map(|v| v * scale));
                accumulate(grads, sims[2], sg.d_cos_yy.map(|v| v * scale));
                if let Some([vx, vy]) = bias {
                    let shape_x = self.value(*vx).shape().to_vec();
                    let shape_y = self.value(*vy).shape().to_vec();
                    accumulate(grads, *vx, Tensor::new(shape_x, sg.d_b_x.iter().map(|v| v * scale).collect()));
                    accumulate(grads, *vy, Tensor::new(shape_y, sg.d_b_y.iter().map(|v| v * scale).collect()));
                }
            }
        }
    }
}

fn apply(kind: Binary, x: f64, y: f64) -> f64 {
    match kind {
        Binary::Add => x + y,
        Binary::Sub => x - y,
        Binary::Mul => x * y,
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Sums a gradient over the axes that were broadcast to reach its shape.
fn unbroadcast(g: &Tensor, target: &[usize]) -> Tensor {
    if g.shape() == target {
        return g.clone();
    }
    let map = broadcast_index_map(target, g.shape());
    let mut data = vec![0.0; target.iter().product()];
    for (k, &t) in map.iter().enumerate() {
        data[t] += g.data()[k];
    }
    Tensor::new(target.to_vec(), data)
}

fn reduce(t: &Tensor, axis: usize, f: impl Fn(&[f64]) -> f64) -> Tensor {
    let (outer, len, inner) = axis_split(t.shape(), axis);
    let mut data = vec![0.0; outer * inner];
    let mut scratch = vec![0.0; len];
    for o in 0..outer {
        for i in 0..inner {
            for k in 0..len {
                scratch[k] = t.data()[(o * len + k) * inner + i];
            }
            data[o * inner + i] = f(&scratch);
        }
    }
    let mut shape = t.shape().to_vec();
    shape[axis] = 1;
    Tensor::new(shape, data)
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

pub(crate) fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let [batch, h, wd, cin] = dims4(x);
    let [k, k2, cin2, cout] = dims4(w);
    assert_eq!((k, cin), (k2, cin2), "conv kernel {:?} vs input {:?}", w.shape(), x.shape());
    let (ho, wo) = (conv_out(h, k, stride, pad), conv_out(wd, k, stride, pad));
    let mut out = vec![0.0; batch * ho * wo * cout];
    for bi in 0..batch {
        for oy in 0..ho {
            for ox in 0..wo {
                let o = &mut out[((bi * ho + oy) * wo + ox) * cout..][..cout];
                o.copy_from_slice(b.data());
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        let xin = &x.data()[((bi * h + iy as usize) * wd + ix as usize) * cin..][..cin];
                        let wk = &w.data()[(ky * k + kx) * cin * cout..][..cin * cout];
                        for (ci, &xv) in xin.iter().enumerate() {
                            if xv == 0.0 {
                                continue;
                            }
                            for (ov, &wv) in o.iter_mut().zip(&wk[ci * cout..(ci + 1) * cout]) {
                                *ov += xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![batch, ho, wo, cout], out)
}

fn conv2d_backward(x: &Tensor, w: &Tensor, g: &Tensor, stride: usize, pad: usize) -> (Tensor, Tensor, Tensor) {
    let [batch, h, wd, cin] = dims4(x);
    let [k, _, _, cout] = dims4(w);
    let [_, ho, wo, _] = dims4(g);
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; cout];
    for bi in 0..batch {
        for oy in 0..ho {
            for ox in 0..wo {
                let go = &g.data()[((bi * ho + oy) * wo + ox) * cout..][..cout];
                for (acc, &v) in gb.iter_mut().zip(go) {
                    *acc += v;
                }
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        let xoff = ((bi * h + iy as usize) * wd + ix as usize) * cin;
                        let woff = (ky * k + kx) * cin * cout;
                        for ci in 0..cin {
                            let xv = x.data()[xoff + ci];
                            let wrow = &w.data()[woff + ci * cout..][..cout];
                            let gwrow = &mut gw[woff + ci * cout..][..cout];
                            let mut acc = 0.0;
                            for co in 0..cout {
                                acc += go[co] * wrow[co];
                                gwrow[co] += go[co] * xv;
                            }
                            gx[xoff + ci] += acc;
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), gx),
        Tensor::new(w.shape().to_vec(), gw),
        Tensor::new(vec![cout], gb),
    )
}

fn dims4(t: &Tensor) -> [usize; 4] {
    let s = t.shape();
    assert_eq!(s.len(), 4, "expected rank-4 tensor, got {s:?}");
    [s[0], s[1], s[2], s[3]]
}

/// Adds `g · ∂cos(u, v)/∂u` and `g · ∂cos(u, v)/∂v` into the two buffers.
fn cosine_grad_into(u: &[f64], v: &[f64], g: f64, gu: &mut [f64], gv: &mut [f64]) {
    let nu = crate::tensor::norm(u);
    let nv = crate::tensor::norm(v);
    if nu <= COS_FLOOR && nv <= COS_FLOOR {
        return;
    }
    let denom = nu * nv + COS_FLOOR;
    let uv = crate::tensor::dot(u, v);
    let raw = uv / denom;
    if raw.abs() >= 1.0 {
        // clamped region
        return;
    }
    // d/du [uv / (|u||v| + eps)] = v/denom - uv |v| u / (|u| denom²)
    let cu = if nu > 0.0 { uv * nv / (nu * denom * denom) } else { 0.0 };
    let cv = if nv > 0.0 { uv * nu / (nv * denom * denom) } else { 0.0 };
    for k in 0..u.len() {
        gu[k] += g * (v[k] / denom - cu * u[k]);
        gv[k] += g * (u[k] / denom - cv * v[k]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Central-difference check of `d(sum(w ⊙ f(x)))/dx` for a single-input graph builder.
    fn check_unary(shape: &[usize], build: impl Fn(&mut Tape, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = random(shape, &mut rng);
        let mut probe_tape = Tape::new();
        let px = probe_tape.leaf(x0.clone());
        let probe_out = build(&mut probe_tape, px);
        let out_shape = probe_tape.value(probe_out).shape().to_vec();
        let weights = random(&out_shape, &mut rng);

        let eval = |x: &Tensor| -> (f64, Option<Tensor>) {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let y = build(&mut tape, xv);
            let w = tape.leaf(weights.clone());
            let p = tape.mul(y, w);
            let flat = tape.reshape(p, &[weights.len()]);
            let s = tape.sum_axis(flat, 0);
            let grads = tape.backward(s);
            (tape.value(s).item(), grads.get(xv).cloned())
        };
        let (_, analytic) = eval(&x0);
        let analytic = analytic.expect("no gradient");
        let h = 1e-6;
        for k in 0..x0.len() {
            let mut xp = x0.clone();
            xp.data_mut()[k] += h;
            let mut xm = x0.clone();
            xm.data_mut()[k] -= h;
            let fd = (eval(&xp).0 - eval(&xm).0) / (2.0 * h);
            let a = analytic.data()[k];
            assert!(
                (fd - a).abs() <= 1e-6 * (1.0 + fd.abs()),
                "element {k}: analytic {a} vs fd {fd}"
            );
        }
    }

    #[test]
    fn conv2d_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random(&[3, 3, 2, 4], &mut rng);
        let b = random(&[4], &mut rng);
        check_unary(&[2, 5, 5, 2], |t, x| {
            let wv = t.leaf(w.clone());
            let bv = t.leaf(b.clone());
            t.conv2d(x, wv, bv, 2, 1)
        });
        let x = random(&[1, 4, 4, 2], &mut rng);
        check_unary(&[3, 3, 2, 4], |t, wv| {
            let xv = t.leaf(x.clone());
            let bv = t.leaf(b.clone());
            t.conv2d(xv, wv, bv, 1, 1)
        });
    }

    #[test]
    fn reduction_and_softmax_gradients() {
        check_unary(&[2, 3, 4], |t, x| t.mean_axis(x, 1));
        check_unary(&[2, 3, 4], |t, x| t.max_axis(x, 2));
        check_unary(&[3, 5], |t, x| t.softmax(x));
        check_unary(&[3, 5], |t, x| {
            let s = t.sigmoid(x);
            t.relu(s)
        });
    }

    #[test]
    fn broadcast_mul_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gate = random(&[2, 1, 1, 3], &mut rng);
        check_unary(&[2, 2, 2, 3], |t, x| {
            let gv = t.leaf(gate.clone());
            t.mul(x, gv)
        });
        let m = random(&[2, 2, 2, 3], &mut rng);
        check_unary(&[2, 1, 1, 3], |t, g| {
            let mv = t.leaf(m.clone());
            t.mul(mv, g)
        });
    }

    #[test]
    fn matmul_and_cosine_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let b = random(&[4, 3], &mut rng);
        check_unary(&[2, 4], |t, x| {
            let bv = t.leaf(b.clone());
            t.matmul(x, bv)
        });
        let other = random(&[3, 4], &mut rng);
        check_unary(&[2, 4], |t, x| {
            let o = t.leaf(other.clone());
            t.cosine_matrix(x, o)
        });
        check_unary(&[3, 4], |t, x| t.cosine_matrix(x, x));
        let pair = random(&[3, 4], &mut rng);
        check_unary(&[3, 4], |t, x| {
            let o = t.leaf(pair.clone());
            t.row_cosine(x, o)
        });
        let kb = random(&[2, 3, 4], &mut rng);
        check_unary(&[2, 5, 4], |t, x| {
            let o = t.leaf(kb.clone());
            t.batch_matmul_nt(x, o)
        });
    }

    #[test]
    fn gather_and_concat_gradients() {
        check_unary(&[3, 2], |t, x| t.select_rows(x, &[0, 2, 2, 1]));
        check_unary(&[2, 3], |t, x| {
            let s = t.scale(x, 2.0);
            t.concat_last(&[x, s])
        });
    }

    #[test]
    fn grad_reverse_negates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]));
        let r = tape.grad_reverse(x, 1.0);
        assert_eq!(tape.value(r), tape.value(x));
        let s = tape.sum_axis(r, 0);
        let g = tape.backward(s);
        assert_eq!(g.get(x).unwrap().data(), &[-1.0, -1.0, -1.0]);
    }
}
