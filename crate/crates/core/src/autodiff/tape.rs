//! Define-by-run tape for reverse-mode differentiation.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each op appends one node whose
//! inputs are strictly earlier nodes, so reverse iteration over the node list
//! is a valid reverse-topological order.

use std::collections::BTreeMap;

use super::tensor::{gemm, Tensor};
use super::DiffError;

/// Rows with a norm below this are treated as zero by [`Tape::cosine_rows`].
pub const ZERO_NORM_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Relu(Var),
    Square(Var),
    Abs(Var),
    Log(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
    /// `norms[i]` is `Some(‖row‖)` when row `i` was rescaled.
    L2Clip {
        input: Var,
        clip: f64,
        norms: Vec<Option<f64>>,
    },
    StopGradient,
    Concat(Var, Var),
    /// Per-row norms of both inputs; zero-norm rows produce 0 and no gradient.
    CosineRows {
        a: Var,
        b: Var,
        norms: Vec<(f64, f64)>,
    },
    GatherRows(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar loss, keyed by parameter handle.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(&var)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.grads.iter().map(|(v, t)| (*v, t))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = match op {
            Op::Leaf => true,
            Op::Constant | Op::StopGradient => false,
            _ => inputs.iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input (a trainable parameter).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    /// Non-differentiable input (data, frozen weights, sampled noise).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, &[])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), DiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(DiffError::Dimension {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn matrix_dims(&self, op: &'static str, a: Var) -> Result<(usize, usize), DiffError> {
        self.value(a).as_matrix().ok_or_else(|| DiffError::Rank {
            op,
            shape: self.shape(a).to_vec(),
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, k2, n) = match (sa, sb) {
            ([m, k], [k2, n]) => (*m, *k, *k2, *n),
            _ => {
                return Err(DiffError::Dimension {
                    op: "matmul",
                    lhs: sa.to_vec(),
                    rhs: sb.to_vec(),
                })
            }
        };
        if k != k2 {
            return Err(DiffError::Dimension {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let out = gemm(self.value(a).data(), self.value(b).data(), m, k, n, false, false);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip(self.value(b), |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip(self.value(b), |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip(self.value(b), |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a bias vector `b[d]` to every row of `a[n×d]` (or to `a[d]`).
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (_, cols) = self.matrix_dims("add_bias", a)?;
        if self.shape(b) != [cols] {
            return Err(DiffError::Dimension {
                op: "add_bias",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let bias = self.value(b).data();
        let av = self.value(a);
        let data = av.data().iter().enumerate().map(|(i, &x)| x + bias[i % cols]).collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        Ok(self.push(out, Op::AddBias(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| c * x);
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.push(out, Op::Square(a), &[a])
    }

    /// Absolute value; the backward rule uses subgradient 0 at 0.
    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        self.push(out, Op::Abs(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var, DiffError> {
        if let Some(index) = self.value(a).data().iter().position(|&x| x <= 0.0) {
            return Err(DiffError::Domain { op: "log", index });
        }
        let out = self.value(a).map(f64::ln);
        Ok(self.push(out, Op::Log(a), &[a]))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, DiffError> {
        let (rows, cols) = self.matrix_dims("softmax_rows", a)?;
        let av = self.value(a);
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let row = av.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            data.extend(exps.into_iter().map(|e| e / z));
        }
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        Ok(self.push(out, Op::SoftmaxRows(a), &[a]))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var, DiffError> {
        let (rows, cols) = self.matrix_dims("log_softmax_rows", a)?;
        let av = self.value(a);
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let row = av.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            data.extend(row.iter().map(|&x| x - lse));
        }
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        Ok(self.push(out, Op::LogSoftmaxRows(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::from_parts(vec![], vec![s]), Op::Sum(a), &[a])
    }

    /// Mean over all elements; the mean of an empty tensor is 0.
    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = if v.is_empty() {
            0.0
        } else {
            v.data().iter().sum::<f64>() / v.len() as f64
        };
        self.push(Tensor::from_parts(vec![], vec![m]), Op::Mean(a), &[a])
    }

    /// Row-wise `e / max(1, ‖e‖₂ / clip)`. Rows with `‖e‖₂ == clip` take the
    /// identity branch.
    pub fn l2_clip(&mut self, a: Var, clip: f64) -> Result<Var, DiffError> {
        if !(clip > 0.0 && clip.is_finite()) {
            return Err(DiffError::InvalidClip(clip));
        }
        let (rows, cols) = self.matrix_dims("l2_clip", a)?;
        let av = self.value(a);
        let mut data = Vec::with_capacity(rows * cols);
        let mut norms = Vec::with_capacity(rows);
        for i in 0..rows {
            let row = av.row(i);
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > clip {
                // Rounding can leave the scaled norm an ulp above `clip`; shrink
                // until it is not, so a second clip is the identity bit-exactly.
                let mut factor = clip / norm;
                let norm_at = |f: f64| row.iter().map(|x| (x * f) * (x * f)).sum::<f64>().sqrt();
                while norm_at(factor) > clip {
                    factor = f64::from_bits(factor.to_bits() - 1);
                }
                data.extend(row.iter().map(|x| x * factor));
                norms.push(Some(norm));
            } else {
                data.extend_from_slice(row);
                norms.push(None);
            }
        }
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        Ok(self.push(out, Op::L2Clip { input: a, clip, norms }, &[a]))
    }

    /// Forward identity; nothing flows back through the result.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let out = self.value(a).clone();
        self.push(out, Op::StopGradient, &[a])
    }

    /// Concatenates along the last axis. Both inputs rank 1, or both rank 2
    /// with the same number of rows.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (rows, ca, cb, shape) = match (sa.as_slice(), sb.as_slice()) {
            ([x], [y]) => (1, *x, *y, vec![x + y]),
            ([r1, x], [r2, y]) if r1 == r2 => (*r1, *x, *y, vec![*r1, x + y]),
            _ => {
                return Err(DiffError::Dimension {
                    op: "concat",
                    lhs: sa,
                    rhs: sb,
                })
            }
        };
        let (av, bv) = (self.value(a), self.value(b));
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for i in 0..rows {
            data.extend_from_slice(&av.data()[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&bv.data()[i * cb..(i + 1) * cb]);
        }
        Ok(self.push(Tensor::from_parts(shape, data), Op::Concat(a, b), &[a, b]))
    }

    /// Cosine similarity of matching rows, shape `[n]`. A row pair where
    /// either norm is below [`ZERO_NORM_EPS`] yields 0 and no gradient.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape("cosine_rows", a, b)?;
        let (rows, _) = self.matrix_dims("cosine_rows", a)?;
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(rows);
        let mut norms = Vec::with_capacity(rows);
        for i in 0..rows {
            let (ra, rb) = (av.row(i), bv.row(i));
            let na = ra.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = rb.iter().map(|x| x * x).sum::<f64>().sqrt();
            norms.push((na, nb));
            if na < ZERO_NORM_EPS || nb < ZERO_NORM_EPS {
                out.push(0.0);
            } else {
                let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
                out.push(dot / (na * nb));
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![rows], out),
            Op::CosineRows { a, b, norms },
            &[a, b],
        ))
    }

    /// Picks `a[i, indices[i]]` for every row, shape `[n]`.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var, DiffError> {
        let (rows, cols) = self.matrix_dims("gather_rows", a)?;
        if indices.len() != rows {
            return Err(DiffError::Dimension {
                op: "gather_rows",
                lhs: self.shape(a).to_vec(),
                rhs: vec![indices.len()],
            });
        }
        if let Some(&bad) = indices.iter().find(|&&k| k >= cols) {
            return Err(DiffError::Index {
                op: "gather_rows",
                index: bad,
                bound: cols,
            });
        }
        let av = self.value(a);
        let out = indices
            .iter()
            .enumerate()
            .map(|(i, &k)| av.data()[i * cols + k])
            .collect();
        Ok(self.push(
            Tensor::from_parts(vec![rows], out),
            Op::GatherRows(a, indices.to_vec()),
            &[a],
        ))
    }

    /// Reverse accumulation from a one-element `loss` to every var in `params`.
    /// Params the loss does not depend on receive zero tensors.
    pub fn backward(&self, loss: Var, params: &[Var]) -> Result<Gradients, DiffError> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(DiffError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::from_parts(loss_value.shape().to_vec(), vec![1.0]));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }

        let mut out = BTreeMap::new();
        for &p in params {
            let g = grads
                .get(p.0)
                .and_then(Clone::clone)
                .unwrap_or_else(|| Tensor::zeros(self.shape(p)));
            out.insert(p, g);
        }
        Ok(Gradients { grads: out })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, contrib: Tensor) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => *existing = existing.zip(&contrib, |x, y| x + y),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Constant | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.needs(*a) {
                    let da = gemm(g.data(), bv.data(), m, n, k, false, true);
                    self.accumulate(grads, *a, Tensor::from_parts(vec![m, k], da));
                }
                if self.needs(*b) {
                    let db = gemm(av.data(), g.data(), k, m, n, true, false);
                    self.accumulate(grads, *b, Tensor::from_parts(vec![k, n], db));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.zip(self.value(*b), |x, y| x * y));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.zip(self.value(*a), |x, y| x * y));
                }
            }
            Op::AddBias(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.needs(*b) {
                    let cols = self.value(*b).len();
                    let mut db = vec![0.0; cols];
                    for (i, &x) in g.data().iter().enumerate() {
                        db[i % cols] += x;
                    }
                    self.accumulate(grads, *b, Tensor::from_parts(vec![cols], db));
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|x| c * x)),
            Op::Tanh(a) => self.accumulate(grads, *a, g.zip(out, |x, y| x * (1.0 - y * y))),
            Op::Relu(a) => {
                let d = g.zip(self.value(*a), |x, v| if v > 0.0 { x } else { 0.0 });
                self.accumulate(grads, *a, d);
            }
            Op::Square(a) => {
                self.accumulate(grads, *a, g.zip(self.value(*a), |x, v| 2.0 * v * x));
            }
            Op::Abs(a) => {
                let d = g.zip(self.value(*a), |x, v| {
                    if v > 0.0 {
                        x
                    } else if v < 0.0 {
                        -x
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *a, d);
            }
            Op::Log(a) => self.accumulate(grads, *a, g.zip(self.value(*a), |x, v| x / v)),
            Op::SoftmaxRows(a) => {
                let (rows, cols) = out.as_matrix().unwrap();
                let mut d = Vec::with_capacity(rows * cols);
                for i in 0..rows {
                    let (y, gr) = (out.row(i), &g.data()[i * cols..(i + 1) * cols]);
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    d.extend(y.iter().zip(gr).map(|(yv, gv)| yv * (gv - dot)));
                }
                self.accumulate(grads, *a, Tensor::from_parts(out.shape().to_vec(), d));
            }
            Op::LogSoftmaxRows(a) => {
                let (rows, cols) = out.as_matrix().unwrap();
                let mut d = Vec::with_capacity(rows * cols);
                for i in 0..rows {
                    let (y, gr) = (out.row(i), &g.data()[i * cols..(i + 1) * cols]);
                    let total: f64 = gr.iter().sum();
                    d.extend(y.iter().zip(gr).map(|(yv, gv)| gv - yv.exp() * total));
                }
                self.accumulate(grads, *a, Tensor::from_parts(out.shape().to_vec(), d));
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                let shape = self.shape(*a).to_vec();
                let n = self.value(*a).len();
                self.accumulate(grads, *a, Tensor::from_parts(shape, vec![gv; n]));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                let gv = if n == 0 { 0.0 } else { g.data()[0] / n as f64 };
                let shape = self.shape(*a).to_vec();
                self.accumulate(grads, *a, Tensor::from_parts(shape, vec![gv; n]));
            }
            Op::L2Clip { input, clip, norms } => {
                let e = self.value(*input);
                let cols = e.cols();
                let mut d = Vec::with_capacity(e.len());
                for (i, norm) in norms.iter().enumerate() {
                    let (row, gr) = (e.row(i), &g.data()[i * cols..(i + 1) * cols]);
                    match norm {
                        None => d.extend_from_slice(gr),
                        Some(n) => {
                            let dot: f64 = row.iter().zip(gr).map(|(a, b)| a * b).sum();
                            let f = clip / n;
                            let n2 = n * n;
                            d.extend(row.iter().zip(gr).map(|(ev, gv)| f * (gv - ev * dot / n2)));
                        }
                    }
                }
                self.accumulate(grads, *input, Tensor::from_parts(e.shape().to_vec(), d));
            }
            Op::Concat(a, b) => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let ca = *sa.last().unwrap();
                let cb = *sb.last().unwrap();
                let rows = if sa.len() == 1 { 1 } else { sa[0] };
                let mut da = Vec::with_capacity(rows * ca);
                let mut db = Vec::with_capacity(rows * cb);
                for i in 0..rows {
                    let gr = &g.data()[i * (ca + cb)..(i + 1) * (ca + cb)];
                    da.extend_from_slice(&gr[..ca]);
                    db.extend_from_slice(&gr[ca..]);
                }
                self.accumulate(grads, *a, Tensor::from_parts(sa, da));
                self.accumulate(grads, *b, Tensor::from_parts(sb, db));
            }
            Op::CosineRows { a, b, norms } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let cols = av.cols();
                let mut da = Vec::with_capacity(av.len());
                let mut db = Vec::with_capacity(bv.len());
                for (i, &(na, nb)) in norms.iter().enumerate() {
                    let (ra, rb) = (av.row(i), bv.row(i));
                    if na < ZERO_NORM_EPS || nb < ZERO_NORM_EPS {
                        da.extend(std::iter::repeat_n(0.0, cols));
                        db.extend(std::iter::repeat_n(0.0, cols));
                        continue;
                    }
                    let c = out.data()[i];
                    let gi = g.data()[i];
                    let inv = 1.0 / (na * nb);
                    da.extend(ra.iter().zip(rb).map(|(x, y)| gi * (y * inv - c * x / (na * na))));
                    db.extend(ra.iter().zip(rb).map(|(x, y)| gi * (x * inv - c * y / (nb * nb))));
                }
                self.accumulate(grads, *a, Tensor::from_parts(av.shape().to_vec(), da));
                self.accumulate(grads, *b, Tensor::from_parts(bv.shape().to_vec(), db));
            }
            Op::GatherRows(a, indices) => {
                let av = self.value(*a);
                let cols = av.cols();
                let mut d = vec![0.0; av.len()];
                for (i, &k) in indices.iter().enumerate() {
                    d[i * cols + k] = g.data()[i];
                }
                self.accumulate(grads, *a, Tensor::from_parts(av.shape().to_vec(), d));
            }
        }
    }
}
