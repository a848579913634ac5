use std::sync::Arc;

use super::kernels;
use super::tensor::Tensor;
use super::{NumericsError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    Relu(Var),
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    Transpose(Var),
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of primitive operations for reverse-mode differentiation.
///
/// A tape built with [`Tape::inference`] evaluates the same kernels but keeps
/// no backward state, so every value on it is untracked.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient mapping produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    tracked: Vec<bool>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `v`, absent when `v` is untracked or the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, zero-filled when `v` is tracked but unused; `None` for
    /// untracked values.
    pub fn get_or_zeros(&self, v: Var) -> Option<Tensor> {
        if !self.tracked.get(v.0).copied().unwrap_or(false) {
            return None;
        }
        Some(self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0])))
    }

    /// Removes and returns the gradient of `v`.
    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn accumulate(slot: &mut Option<Tensor>, shape: &[usize], f: impl FnOnce(&mut [f64])) {
    let t = slot.get_or_insert_with(|| Tensor::zeros(shape));
    f(t.data_mut());
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), recording: true }
    }

    pub fn inference() -> Self {
        Self { nodes: Vec::new(), recording: false }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op: name });
        }
        Ok(self.push_arc(Arc::new(value), op, requires_grad))
    }

    fn push_arc(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        let (op, requires_grad) = if self.recording && requires_grad { (op, true) } else { (Op::Leaf, false) };
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Tracked input: receives a gradient on backward.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_arc(Arc::new(value), Op::Leaf, true)
    }

    pub fn leaf_shared(&mut self, value: Arc<Tensor>) -> Var {
        self.push_arc(value, Op::Leaf, true)
    }

    /// Untracked input: never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_arc(Arc::new(value), Op::Leaf, false)
    }

    pub fn constant_shared(&mut self, value: Arc<Tensor>) -> Var {
        self.push_arc(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn value_shared(&self, v: Var) -> Arc<Tensor> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.needs(&[a, b]);
        self.push(out, Op::MatMul(a, b), rg, "matmul")
    }

    /// Elementwise sum. `b` may also be a vector matching the last axis of
    /// `a`, broadcast over the leading rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let rg = self.needs(&[a, b]);
        if va.shape() == vb.shape() {
            let out = va.add(vb)?;
            return self.push(out, Op::Add(a, b), rg, "add");
        }
        if vb.rank() == 1 && va.rank() >= 1 && va.cols() == vb.len() {
            let mut out = va.clone();
            let bias = vb.data().to_vec();
            for row in out.data_mut().chunks_exact_mut(bias.len()) {
                for (o, b) in row.iter_mut().zip(&bias) {
                    *o += b;
                }
            }
            return self.push(out, Op::AddRow(a, b), rg, "add");
        }
        Err(NumericsError::shape("add", va.shape(), vb.shape()))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        let rg = self.needs(&[a, b]);
        self.push(out, Op::Mul(a, b), rg, "mul")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).scale(s);
        let rg = self.needs(&[a]);
        self.push(out, Op::Scale(a, s), rg, "scale")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.needs(&[a]);
        self.push(out, Op::Sum(a), rg, "sum")
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, false)
    }

    /// Softmax over the last axis of a `queries x keys` score matrix where
    /// query `i` may only attend to keys `0..=i + (keys - queries)`.
    pub fn softmax_causal(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, true)
    }

    fn softmax_impl(&mut self, a: Var, causal: bool) -> Result<Var> {
        let va = self.value(a);
        if causal && va.rank() != 2 {
            return Err(NumericsError::RankMismatch { op: "softmax", expected: 2, shape: va.shape().to_vec() });
        }
        let (rows, cols) = (va.rows(), va.cols());
        let mut out = va.clone();
        kernels::softmax_rows(out.data_mut(), rows, cols, causal);
        let rg = self.needs(&[a]);
        self.push(out, Op::Softmax(a), rg, "softmax")
    }

    /// Layer norm over the last axis with affine `gamma`/`beta` vectors.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let cols = vx.cols();
        if vg.shape() != [cols] || vb.shape() != [cols] {
            return Err(NumericsError::shape("layer_norm", vx.shape(), vg.shape()));
        }
        let (out, xhat, rstd) = kernels::layer_norm(vx.data(), cols, vg.data(), vb.data());
        let out = Tensor::new(vx.shape().to_vec(), out)?;
        let rg = self.needs(&[x, gamma, beta]);
        let op = if self.recording && rg {
            Op::LayerNorm { x, gamma, beta, xhat, rstd }
        } else {
            Op::Leaf
        };
        self.push(out, op, rg, "layer_norm")
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(kernels::gelu);
        let rg = self.needs(&[a]);
        self.push(out, Op::Gelu(a), rg, "gelu")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.max(0.0));
        let rg = self.needs(&[a]);
        self.push(out, Op::Relu(a), rg, "relu")
    }

    /// Gathers rows of a `vocab x dim` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        if vt.rank() != 2 || ids.is_empty() {
            return Err(NumericsError::RankMismatch { op: "embedding", expected: 2, shape: vt.shape().to_vec() });
        }
        let (vocab, dim) = (vt.shape()[0], vt.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(NumericsError::IndexOutOfRange { op: "embedding", index: id, bound: vocab });
            }
            data.extend_from_slice(vt.row(id));
        }
        let out = Tensor::new(vec![ids.len(), dim], data)?;
        let rg = self.needs(&[table]);
        self.push(out, Op::Embedding { table, ids: ids.to_vec() }, rg, "embedding")
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        if vl.rank() != 2 || vl.rows() != targets.len() {
            return Err(NumericsError::shape("cross_entropy", vl.shape(), &[targets.len()]));
        }
        let cols = vl.cols();
        let mut probs = vl.data().to_vec();
        let mut nll = 0.0;
        for (row, &t) in probs.chunks_exact_mut(cols).zip(targets) {
            if t >= cols {
                return Err(NumericsError::IndexOutOfRange { op: "cross_entropy", index: t, bound: cols });
            }
            let logp = kernels::log_softmax(row);
            nll -= logp[t];
            for (p, lp) in row.iter_mut().zip(logp) {
                *p = lp.exp();
            }
        }
        let out = Tensor::scalar(nll / targets.len() as f64);
        let rg = self.needs(&[logits]);
        self.push(out, Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, rg, "cross_entropy")
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(a).slice_rows(start, len)?;
        let rg = self.needs(&[a]);
        self.push(out, Op::SliceRows { x: a, start }, rg, "slice")
    }

    /// Distinct handle with the same value; its gradient is kept apart from
    /// other readers of `a`.
    pub fn alias(&mut self, a: Var) -> Result<Var> {
        let rows = self.value(a).rows();
        if self.value(a).rank() != 2 {
            let rg = self.needs(&[a]);
            let out = self.value(a).clone();
            return self.push(out, Op::Scale(a, 1.0), rg, "alias");
        }
        self.slice_rows(a, 0, rows)
    }

    /// Concatenates 2-D tensors along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(NumericsError::Empty { op: "concat" })?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rank() != 2 || v.cols() != cols {
                return Err(NumericsError::shape("concat", self.value(*first).shape(), v.shape()));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        let rg = self.needs(parts);
        self.push(out, Op::ConcatRows(parts.to_vec()), rg, "concat")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let rg = self.needs(&[a]);
        self.push(out, Op::Transpose(a), rg, "transpose")
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(NumericsError::NotScalar { shape: lv.shape().to_vec() });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        let tracked: Vec<bool> = self.nodes.iter().map(|nd| nd.requires_grad).collect();
        let shapes: Vec<Vec<usize>> = self.nodes.iter().map(|nd| nd.value.shape().to_vec()).collect();
        if tracked[loss.0] {
            grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));
        }

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            let want = |v: &Var| tracked[v.0];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(dy);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let (m, k, nn) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                    if want(a) {
                        accumulate(&mut grads[a.0], &shapes[a.0], |g| {
                            kernels::gemm(m, nn, k, dy.data(), false, vb.data(), true, g, true)
                        });
                    }
                    if want(b) {
                        accumulate(&mut grads[b.0], &shapes[b.0], |g| {
                            kernels::gemm(k, m, nn, va.data(), true, dy.data(), false, g, true)
                        });
                    }
                }
                Op::Add(a, b) => {
                    for v in [a, b] {
                        if want(v) {
                            accumulate(&mut grads[v.0], &shapes[v.0], |g| add_into(g, dy.data()));
                        }
                    }
                }
                Op::AddRow(a, b) => {
                    if want(a) {
                        accumulate(&mut grads[a.0], &shapes[a.0], |g| add_into(g, dy.data()));
                    }
                    if want(b) {
                        let cols = shapes[b.0][0];
                        accumulate(&mut grads[b.0], &shapes[b.0], |g| {
                            for row in dy.data().chunks_exact(cols) {
                                add_into(g, row);
                            }
                        });
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    if want(a) {
                        accumulate(&mut grads[a.0], &shapes[a.0], |g| {
                            for ((g, d), y) in g.iter_mut().zip(dy.data()).zip(vb.data()) {
                                *g += d * y;
                            }
                        });
                    }
                    if want(b) {
                        accumulate(&mut grads[b.0], &shapes[b.0], |g| {
                            for ((g, d), x) in g.iter_mut().zip(dy.data()).zip(va.data()) {
                                *g += d * x;
                            }
                        });
                    }
                }
                Op::Scale(a, s) => {
                    if want(a) {
                        accumulate(&mut grads[a.0], &shapes[a.0], |g| {
                            for (g, d) in g.iter_mut().zip(dy.data()) {
                                *g += d * s;
                            }
                        });
                    }
                }
                Op::Sum(a) => {
                    if want(a) {
                        let d = dy.item();
                        accumulate(&mut grads[a.0], &shapes[a.0], |g| g.iter_mut().for_each(|g| *g += d));
                    }
                }
                Op::Softmax(a) => {
                    if want(a) {
                        let y = &node.value;
                        let cols = y.cols();
                        accumulate(&mut grads[a.0], &shapes[a.0], |g| {
                            for ((g, d), y) in
                                g.chunks_exact_mut(cols).zip(dy.data().chunks_exact(cols)).zip(y.data().chunks_exact(cols))
                            {
                                let inner: f64 = d.iter().zip(y).map(|(d, y)| d * y).sum();
                                for ((g, d), y) in g.iter_mut().zip(d).zip(y) {
                                    *g += y * (d - inner);
                                }
                            }
                        });
                    }
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    let cols = shapes[x.0].last().copied().unwrap_or(1);
                    let gv = self.value(*gamma).data();
                    if want(beta) {
                        accumulate(&mut grads[beta.0], &shapes[beta.0], |g| {
                            for row in dy.data().chunks_exact(cols) {
                                add_into(g, row);
                            }
                        });
                    }
                    if want(gamma) {
                        accumulate(&mut grads[gamma.0], &shapes[gamma.0], |g| {
                            for (d, h) in dy.data().chunks_exact(cols).zip(xhat.chunks_exact(cols)) {
                                for ((g, d), h) in g.iter_mut().zip(d).zip(h) {
                                    *g += d * h;
                                }
                            }
                        });
                    }
                    if want(x) {
                        let nf = cols as f64;
                        accumulate(&mut grads[x.0], &shapes[x.0], |g| {
                            let mut gh = vec![0.0; cols];
                            for (((g, d), h), r) in g
                                .chunks_exact_mut(cols)
                                .zip(dy.data().chunks_exact(cols))
                                .zip(xhat.chunks_exact(cols))
                                .zip(rstd)
                            {
                                for ((o, d), gm) in gh.iter_mut().zip(d).zip(gv) {
                                    *o = d * gm;
                                }
                                let mean_g = gh.iter().sum::<f64>() / nf;
                                let mean_gh = gh.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / nf;
                                for ((g, o), h) in g.iter_mut().zip(&gh).zip(h) {
                                    *g += r * (o - mean_g - h * mean_gh);
                                }
                            }
                        });
                    }
                }
                Op::Gelu(a) => {
                    if want(a) {
                        let va = self.value(*a);
                        accumulate(&mut grads[a.0], &shapes[a.0], |g| {
                            for ((g, d), x) in g.iter_mut().zip(dy.data()).zip(va.data()) {
                                *g += d * kernels::gelu_grad(*x);
                            }
                        });
                    }
                }
                Op::Relu(a) => {
                    if want(a) {
                        let va = self.value(*a);
                        accumulate(&mut grads[a.0], &shapes[a.0], |g| {
                            for ((g, d), x) in g.iter_mut().zip(dy.data()).zip(va.data()) {
                                if *x > 0.0 {
                                    *g += d;
                                }
                            }
                        });
                    }
                }
                Op::Embedding { table, ids } => {
                    if want(table) {
                        let dim = shapes[table.0][1];
                        accumulate(&mut grads[table.0], &shapes[table.0], |g| {
                            for (row, &id) in dy.data().chunks_exact(dim).zip(ids) {
                                add_into(&mut g[id * dim..(id + 1) * dim], row);
                            }
                        });
                    }
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    if want(logits) {
                        let cols = shapes[logits.0][1];
                        let scale = dy.item() / targets.len() as f64;
                        accumulate(&mut grads[logits.0], &shapes[logits.0], |g| {
                            for ((g, p), &t) in g.chunks_exact_mut(cols).zip(probs.chunks_exact(cols)).zip(targets) {
                                for (g, p) in g.iter_mut().zip(p) {
                                    *g += scale * p;
                                }
                                g[t] -= scale;
                            }
                        });
                    }
                }
                Op::SliceRows { x, start } => {
                    if want(x) {
                        let cols = shapes[x.0][1];
                        let s = *start;
                        accumulate(&mut grads[x.0], &shapes[x.0], |g| {
                            add_into(&mut g[s * cols..s * cols + dy.len()], dy.data())
                        });
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = self.value(*p).len();
                        if want(p) {
                            accumulate(&mut grads[p.0], &shapes[p.0], |g| {
                                add_into(g, &dy.data()[offset..offset + len])
                            });
                        }
                        offset += len;
                    }
                }
                Op::Transpose(a) => {
                    if want(a) {
                        let t = dy.transpose()?;
                        accumulate(&mut grads[a.0], &shapes[a.0], |g| add_into(g, t.data()));
                    }
                }
            }
            // Interior nodes keep their gradient too, so callers can read
            // gradients of intermediate values.
            grads[i] = Some(dy);
        }
        Ok(Gradients { grads, tracked, shapes })
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
