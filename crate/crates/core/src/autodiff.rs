//! Tape-based reverse-mode differentiation over 2-D `f64` tensors.
//!
//! Operations append nodes to a [`Tape`]; because a node can only reference
//! earlier nodes the tape is already in topological order, and
//! [`Tape::backward`] walks it once in reverse. Block routing is an input to
//! the attention node, not a node itself, so no gradient reaches the gate
//! scores or the mean-pooled keys through the selection.

use std::sync::Arc;

use crate::attention::{dense_attention, grouped_block_attention, scale_factor, AttentionPattern};
use crate::error::{Error, Result};
use crate::gating::{route_moba, BlockPartition, RoutingTable};
use crate::tensor::{matmul, stable_softmax_rows, Mask, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which keys an attention node sees.
#[derive(Clone, Debug)]
pub enum AttentionRouting {
    DenseCausal,
    /// Frozen block routing; the forward runs the grouped block executor.
    Routed(Arc<RoutingTable>),
}

#[derive(Clone, Debug)]
pub struct AttentionSpec {
    pub num_heads: usize,
    pub head_dim: usize,
    pub scale: bool,
    pub routing: AttentionRouting,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRowBias(Var, Var),
    Sum(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    SoftmaxRows(Var),
    Attention { q: Var, k: Var, v: Var, spec: AttentionSpec },
    CrossEntropy { logits: Var, targets: Vec<usize>, counted: Vec<bool>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Single-owner recording of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node that needed one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input. Rank-1 tensors are stored as a single row.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let value = as_matrix(value);
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        let value = as_matrix(value);
        self.nodes.push(Node {
            value,
            op: Op::Constant,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2().expect("tape values are matrices")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip(a, b, "add", |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let src = self.value(a);
        let value = Tensor::from_fn(src.shape(), |i| src.data()[i] * c)?;
        Ok(self.push(value, Op::Scale(a, c), &[a]))
    }

    /// Adds a `[1, n]` bias to every row of `x: [m, n]`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.dims(bias) != (1, n) {
            return Err(self.dim_err("add_row_bias", x, bias));
        }
        let (xs, bs) = (self.value(x).data(), self.value(bias).data());
        let value = Tensor::from_fn(&[m, n], |i| xs[i] + bs[i % n])?;
        Ok(self.push(value, Op::AddRowBias(x, bias), &[x, bias]))
    }

    /// Sum of all entries as a `[1, 1]` scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total: f64 = self.value(a).data().iter().sum();
        let value = Tensor::from_f64(&[1, 1], &[total])?;
        Ok(self.push(value, Op::Sum(a), &[a]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if start + len > n {
            return Err(Error::Parameter(format!("columns {start}..{} of {n}", start + len)));
        }
        let src = self.value(x).data();
        let value = Tensor::from_fn(&[m, len], |i| src[(i / len) * n + start + i % len])?;
        Ok(self.push(value, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::EmptyInput("concat_cols"))?;
        let m = self.dims(first).0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.dims(p);
            if pm != m {
                return Err(self.dim_err("concat_cols", first, p));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let value = Tensor::new(&[m, total], data)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let value = Tensor::from_fn(src.shape(), |i| {
            let z = src.data()[i];
            0.5 * z * (1.0 + (GELU_C * (z + 0.044715 * z * z * z)).tanh())
        })?;
        Ok(self.push(value, Op::Gelu(x), &[x]))
    }

    /// Row-wise layer normalization with learned `[1, n]` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.dims(gain) != (1, n) || self.dims(bias) != (1, n) {
            return Err(self.dim_err("layer_norm", x, gain));
        }
        let (xs, g, b) = (self.value(x).data(), self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            rstd[r] = 1.0 / (var + LN_EPS).sqrt();
            for c in 0..n {
                let h = (row[c] - mean) * rstd[r];
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias]))
    }

    /// Gathers rows `ids` of `table`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, n) = self.dims(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Parameter(format!("embedding id {bad} out of range for {rows} rows")));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * n);
        for &i in ids {
            data.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let value = Tensor::new(&[ids.len(), n], data)?;
        Ok(self.push(value, Op::Embedding { table, ids: ids.to_vec() }, &[table]))
    }

    /// Row softmax; masked entries are exact zeros and pass no gradient.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&Mask>) -> Result<Var> {
        let value = stable_softmax_rows(self.value(x), mask)?;
        Ok(self.push(value, Op::SoftmaxRows(x), &[x]))
    }

    /// Multi-head attention over `[N, h·d]` projections.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        let (n, width) = self.dims(q);
        if width != spec.num_heads * spec.head_dim {
            return Err(Error::Parameter(format!(
                "attention width {width} != {} heads x {} dims",
                spec.num_heads, spec.head_dim
            )));
        }
        let shape3 = [n, spec.num_heads, spec.head_dim];
        let (q3, k3, v3) = (
            self.value(q).reshape(&shape3)?,
            self.value(k).reshape(&shape3)?,
            self.value(v).reshape(&shape3)?,
        );
        let out = match &spec.routing {
            AttentionRouting::DenseCausal => dense_attention(&q3, &k3, &v3, true, spec.scale)?,
            AttentionRouting::Routed(routing) => grouped_block_attention(&q3, &k3, &v3, routing, spec.scale)?,
        };
        let value = out.reshape(&[n, width])?;
        Ok(self.push(value, Op::Attention { q, k, v, spec }, &[q, k, v]))
    }

    /// Mean cross-entropy over rows where `counted` is true.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], counted: &[bool]) -> Result<Var> {
        let (m, vocab) = self.dims(logits);
        if targets.len() != m || counted.len() != m {
            return Err(Error::Dimension {
                op: "cross_entropy",
                left: vec![m, vocab],
                right: vec![targets.len(), counted.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::Parameter(format!("target {bad} outside vocabulary of {vocab}")));
        }
        let count = counted.iter().filter(|&&c| c).count();
        if count == 0 {
            return Err(Error::Degenerate("every target position is masked".into()));
        }
        let probs = stable_softmax_rows(self.value(logits), None)?;
        let lg = self.value(logits).data();
        let mut total = 0.0;
        for r in (0..m).filter(|&r| counted[r]) {
            let row = &lg[r * vocab..(r + 1) * vocab];
            total += log_sum_exp(row) - row[targets[r]];
        }
        let value = Tensor::from_f64(&[1, 1], &[total / count as f64])?;
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                counted: counted.to_vec(),
                probs: probs.into_data(),
            },
            &[logits],
        ))
    }

    fn zip(&self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(self.dim_err(op, a, b));
        }
        Tensor::from_fn(x.shape(), |i| f(x.data()[i], y.data()[i]))
    }

    fn dim_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Dimension {
            op,
            left: self.value(a).shape().to_vec(),
            right: self.value(b).shape().to_vec(),
        }
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = &self.nodes[root.0].value;
        if root_value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                root_value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (g, node.needs_grad) {
                (Some(g), true) => Tensor::new(node.value.shape(), g).ok(),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let mut acc = |var: Var, delta: Vec<f64>| {
            if !self.nodes[var.0].needs_grad {
                return;
            }
            match &mut grads[var.0] {
                Some(existing) => existing.iter_mut().zip(&delta).for_each(|(e, d)| *e += d),
                slot @ None => *slot = Some(delta),
            }
        };
        let needs = |var: Var| self.nodes[var.0].needs_grad;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let gt = Tensor::new(node.value.shape(), g.to_vec())?;
                if needs(*a) {
                    acc(*a, matmul(&gt, &self.value(*b).transpose()?)?.into_data());
                }
                if needs(*b) {
                    acc(*b, matmul(&self.value(*a).transpose()?, &gt)?.into_data());
                }
            }
            Op::Transpose(a) => {
                let gt = Tensor::new(node.value.shape(), g.to_vec())?;
                acc(*a, gt.transpose()?.into_data());
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, g.iter().zip(y).map(|(g, y)| g * y).collect());
                acc(*b, g.iter().zip(x).map(|(g, x)| g * x).collect());
            }
            Op::Scale(a, c) => acc(*a, g.iter().map(|v| v * c).collect()),
            Op::AddRowBias(x, bias) => {
                let n = self.dims(*bias).1;
                let mut gb = vec![0.0; n];
                for (i, v) in g.iter().enumerate() {
                    gb[i % n] += v;
                }
                acc(*x, g.to_vec());
                acc(*bias, gb);
            }
            Op::Sum(a) => acc(*a, vec![g[0]; self.value(*a).len()]),
            Op::SliceCols { x, start } => {
                let (m, n) = self.dims(*x);
                let len = node.value.dims2()?.1;
                let mut gx = vec![0.0; m * n];
                for r in 0..m {
                    gx[r * n + start..r * n + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                acc(*x, gx);
            }
            Op::ConcatCols(parts) => {
                let (m, total) = node.value.dims2()?;
                let mut offset = 0;
                for &p in parts {
                    let w = self.dims(p).1;
                    let mut gp = Vec::with_capacity(m * w);
                    for r in 0..m {
                        gp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    acc(p, gp);
                    offset += w;
                }
            }
            Op::Gelu(x) => {
                let xs = self.value(*x).data();
                acc(
                    *x,
                    g.iter()
                        .zip(xs)
                        .map(|(g, &z)| {
                            let t = (GELU_C * (z + 0.044715 * z * z * z)).tanh();
                            let dt = GELU_C * (1.0 + 3.0 * 0.044715 * z * z);
                            g * (0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * dt)
                        })
                        .collect(),
                );
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let (m, n) = self.dims(*x);
                let gv = self.value(*gain).data();
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    let gr = &g[r * n..(r + 1) * n];
                    let hr = &xhat[r * n..(r + 1) * n];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for c in 0..n {
                        dgain[c] += gr[c] * hr[c];
                        dbias[c] += gr[c];
                        let dh = gr[c] * gv[c];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[c];
                    }
                    mean_dh /= n as f64;
                    mean_dh_h /= n as f64;
                    for c in 0..n {
                        let dh = gr[c] * gv[c];
                        dx[r * n + c] = rstd[r] * (dh - mean_dh - hr[c] * mean_dh_h);
                    }
                }
                acc(*x, dx);
                acc(*gain, dgain);
                acc(*bias, dbias);
            }
            Op::Embedding { table, ids } => {
                let (rows, n) = self.dims(*table);
                let mut gt = vec![0.0; rows * n];
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..n {
                        gt[id * n + c] += g[r * n + c];
                    }
                }
                acc(*table, gt);
            }
            Op::SoftmaxRows(x) => {
                let (m, n) = node.value.dims2()?;
                let y = node.value.data();
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    let dot: f64 = (0..n).map(|c| g[r * n + c] * y[r * n + c]).sum();
                    for c in 0..n {
                        dx[r * n + c] = y[r * n + c] * (g[r * n + c] - dot);
                    }
                }
                acc(*x, dx);
            }
            Op::Attention { q, k, v, spec } => {
                let (dq, dk, dv) = self.attention_backward(node, *q, *k, *v, spec, g)?;
                acc(*q, dq);
                acc(*k, dk);
                acc(*v, dv);
            }
            Op::CrossEntropy { logits, targets, counted, probs } => {
                let (m, vocab) = self.dims(*logits);
                let count = counted.iter().filter(|&&c| c).count() as f64;
                let mut dl = vec![0.0; m * vocab];
                for r in (0..m).filter(|&r| counted[r]) {
                    for c in 0..vocab {
                        dl[r * vocab + c] = g[0] * probs[r * vocab + c] / count;
                    }
                    dl[r * vocab + targets[r]] -= g[0] / count;
                }
                acc(*logits, dl);
            }
        }
        Ok(())
    }

    fn attention_backward(
        &self,
        node: &Node,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttentionSpec,
        g: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let (n, width) = self.dims(q);
        let (h, d) = (spec.num_heads, spec.head_dim);
        let c = scale_factor(spec.scale, d);
        let pattern = match &spec.routing {
            AttentionRouting::DenseCausal => AttentionPattern::dense_causal(n, h),
            AttentionRouting::Routed(routing) => AttentionPattern::from_routing(routing),
        };
        let (qs, ks, vs, os) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            node.value.data(),
        );
        let at = |row: usize, head: usize| (row * width + head * d)..(row * width + (head + 1) * d);
        let mut dq = vec![0.0; n * width];
        let mut dk = vec![0.0; n * width];
        let mut dv = vec![0.0; n * width];
        let mut probs = Vec::new();
        for row in 0..n {
            for head in 0..h {
                let keys = pattern.keys(row, head);
                let qr = &qs[at(row, head)];
                let gr = &g[at(row, head)];
                probs.clear();
                probs.extend(keys.iter().map(|&j| c * dot(qr, &ks[at(j, head)])));
                let max = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for p in probs.iter_mut() {
                    *p = (*p - max).exp();
                    z += *p;
                }
                probs.iter_mut().for_each(|p| *p /= z);
                let delta = dot(gr, &os[at(row, head)]);
                for (&j, &p) in keys.iter().zip(&probs) {
                    let dlogit = p * (dot(gr, &vs[at(j, head)]) - delta);
                    let kr = at(j, head);
                    for t in 0..d {
                        dq[row * width + head * d + t] += c * dlogit * ks[kr.start + t];
                        dk[kr.start + t] += c * dlogit * qr[t];
                        dv[kr.start + t] += p * gr[t];
                    }
                }
            }
        }
        Ok((dq, dk, dv))
    }
}

fn as_matrix(value: Tensor) -> Tensor {
    if value.shape().len() == 1 {
        let n = value.len();
        value.reshape(&[1, n]).expect("same length")
    } else {
        value
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Central differences `(f(x + εe) − f(x − εe)) / 2ε` for every coordinate.
pub fn finite_difference_gradient(
    mut f: impl FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Parameter(format!("eps must be positive, got {eps}")));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Oracle(format!("function is not finite around coordinate {i}")));
        }
        grad.push((plus - minus) / (2.0 * eps));
    }
    Tensor::new(x.shape(), grad)
}

/// True when re-routing at `x ± eps·e` leaves every selection unchanged, for
/// every coordinate of `q` and `k` (`[N, h, d]`). Finite differences through
/// a top-k gate are only meaningful on such instances.
pub fn routing_is_stable(q: &Tensor, k: &Tensor, partition: &BlockPartition, top_k: usize, eps: f64) -> Result<bool> {
    let base = route_moba(q, k, partition, top_k)?;
    let same = |other: &RoutingTable| base.rows().iter().zip(other.rows()).all(|(a, b)| a.selected == b.selected);
    for which in 0..2 {
        let mut probe = if which == 0 { q.clone() } else { k.clone() };
        for i in 0..probe.len() {
            let orig = probe.data()[i];
            for delta in [eps, -eps] {
                probe.data_mut()[i] = orig + delta;
                let routed = if which == 0 {
                    route_moba(&probe, k, partition, top_k)?
                } else {
                    route_moba(q, &probe, partition, top_k)?
                };
                if !same(&routed) {
                    return Ok(false);
                }
            }
            probe.data_mut()[i] = orig;
        }
    }
    Ok(true)
}

/// `‖a − b‖₂ / max(‖b‖₂, tiny)`.
pub fn relative_error(analytic: &Tensor, reference: &Tensor) -> f64 {
    let diff: f64 = analytic
        .data()
        .iter()
        .zip(reference.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let norm = reference.data().iter().map(|b| b * b).sum::<f64>().sqrt();
    diff / norm.max(1e-300)
}
