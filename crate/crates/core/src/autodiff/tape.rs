use std::borrow::Cow;

use super::tensor::{gemm, Tensor};
use crate::{Error, Result};

/// Epsilon added to the variance inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// `a · b`, or `a · bᵀ` when `b_t` is set.
    MatMul { a: Var, b: Var, b_t: bool },
    Add(Var, Var),
    Mul(Var, Var),
    /// Adds a length-`n` bias to every row of an `m × n` input.
    AddRow { x: Var, bias: Var },
    Scale { x: Var, factor: f64 },
    Sum(Var),
    Gather { table: Var, ids: Vec<usize> },
    LayerNorm { x: Var, gain: Var, bias: Var, rstd: Vec<f64> },
    Gelu(Var),
    Softmax { x: Var },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64>, scale: f64 },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Record of primitive operations in evaluation order.
///
/// Leaves can borrow their values, so recording a forward pass over a set of
/// parameters does not copy them. Operations only ever reference earlier
/// nodes, which keeps the record topologically ordered by construction.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a borrowed leaf.
    pub fn leaf(&mut self, value: &'a Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an owned leaf.
    pub fn leaf_owned(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_t: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        let (k2, n) = if b_t {
            (bv.cols(), bv.rows())
        } else {
            (bv.rows(), bv.cols())
        };
        if k != k2 {
            return Err(Error::shape(format!("matmul inner dims {k} vs {k2}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), b_t, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_vec(&[m, n], out)?, Op::MatMul { a, b, b_t }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(format!(
                "add of {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_vec(av.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(format!(
                "mul of {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(av.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let n = xv.cols();
        if bv.len() != n {
            return Err(Error::shape(format!(
                "bias of length {} for {n} columns",
                bv.len()
            )));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, b) in row.iter_mut().zip(bv.data()) {
                *v += b;
            }
        }
        let out = Tensor::from_vec(&[xv.rows(), n], data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddRow { x, bias }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v * factor).collect();
        let out = Tensor::from_vec(xv.shape(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Scale { x, factor }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Row lookup: output row `r` is `table[ids[r]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (rows, d) = (tv.rows(), tv.cols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::invalid(format!(
                    "row {id} out of range for table with {rows} rows"
                )));
            }
            data.extend_from_slice(tv.row(id));
        }
        let out = Tensor::from_vec(&[ids.len(), d], data)?;
        let rg = self.rg(table);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let n = xv.cols();
        if gv.len() != n || bv.len() != n {
            return Err(Error::shape("layer norm parameters do not match width"));
        }
        let rows = xv.rows();
        let mut out = vec![0.0; rows * n];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (j, v) in row.iter().enumerate() {
                out[r * n + j] = (v - mean) * s * gv.data()[j] + bv.data()[j];
            }
            rstd.push(s);
        }
        let out = Tensor::from_vec(&[rows, n], out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                rstd,
            },
            rg,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| gelu(v)).collect();
        let out = Tensor::from_vec(xv.shape(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Row-wise softmax of a square matrix where row `i` only sees columns
    /// `0..=i`; masked entries are exactly zero.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() != xv.cols() {
            return Err(Error::shape("causal softmax needs a square matrix"));
        }
        let n = xv.cols();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            softmax_into(&xv.row(i)[..=i], &mut out[i * n..i * n + i + 1]);
        }
        let out = Tensor::from_vec(&[n, n], out)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax { x }, rg))
    }

    /// Unmasked row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.cols();
        let mut out = vec![0.0; xv.len()];
        for (src, dst) in xv.data().chunks(n).zip(out.chunks_mut(n)) {
            softmax_into(src, dst);
        }
        let out = Tensor::from_vec(xv.shape(), out).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Softmax { x }, rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        if start + len > n {
            return Err(Error::shape(format!(
                "column slice {start}..{} of {n} columns",
                start + len
            )));
        }
        let rows = xv.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let out = Tensor::from_vec(&[rows, len], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let rows = self.value(*first).rows();
        if parts.iter().any(|p| self.value(*p).rows() != rows) {
            return Err(Error::shape("concat of tensors with different row counts"));
        }
        let width: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let out = Tensor::from_vec(&[rows, width], data)?;
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Summed cross-entropy of `logits` rows against `targets`, times `scale`.
    ///
    /// Pass `1 / targets.len()` as the scale for a per-token mean.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], scale: f64) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, v) = (lv.rows(), lv.cols());
        if targets.len() != rows {
            return Err(Error::shape(format!(
                "{} targets for {rows} logit rows",
                targets.len()
            )));
        }
        let mut probs = vec![0.0; rows * v];
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(Error::invalid(format!("target {t} outside {v} classes")));
            }
            let p = &mut probs[r * v..(r + 1) * v];
            total += softmax_into(lv.row(r), p) - lv.row(r)[t];
        }
        let loss = total * scale;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("cross-entropy evaluated to {loss}")));
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                scale,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient at tape node {idx}"
                )));
            }
            self.propagate(idx, &g, &mut grads);
        }
        let mut out = Vec::with_capacity(grads.len());
        for (node, g) in self.nodes.iter().zip(grads) {
            let g = match (g, &node.op) {
                (Some(g), Op::Leaf) => {
                    if g.iter().any(|v| !v.is_finite()) {
                        return Err(Error::Numerical("non-finite leaf gradient".into()));
                    }
                    Some(Tensor::from_vec(node.value.shape(), g)?)
                }
                _ => None,
            };
            out.push(g);
        }
        Ok(Gradients { grads: out })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut Vec<f64> {
        let len = self.value(v).len();
        grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul { a, b, b_t } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.rows(), av.cols());
                let n = if *b_t { bv.rows() } else { bv.cols() };
                if self.rg(*a) {
                    // dA = dO · op(B)ᵀ
                    let da = self.acc(grads, *a);
                    gemm(m, n, k, g, false, bv.data(), !*b_t, da, true);
                }
                if self.rg(*b) {
                    let db = self.acc(grads, *b);
                    if *b_t {
                        // B is n × k: dB = dOᵀ · A
                        gemm(n, m, k, g, true, av.data(), false, db, true);
                    } else {
                        // B is k × n: dB = Aᵀ · dO
                        gemm(k, m, n, av.data(), true, g, false, db, true);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.rg(v) {
                        add_into(self.acc(grads, v), g);
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let other = self.value(*b).data();
                    let da = self.acc(grads, *a);
                    for ((d, gi), o) in da.iter_mut().zip(g).zip(other) {
                        *d += gi * o;
                    }
                }
                if self.rg(*b) {
                    let other = self.value(*a).data();
                    let db = self.acc(grads, *b);
                    for ((d, gi), o) in db.iter_mut().zip(g).zip(other) {
                        *d += gi * o;
                    }
                }
            }
            Op::AddRow { x, bias } => {
                if self.rg(*x) {
                    add_into(self.acc(grads, *x), g);
                }
                if self.rg(*bias) {
                    let db = self.acc(grads, *bias);
                    let n = db.len();
                    for row in g.chunks(n) {
                        add_into(db, row);
                    }
                }
            }
            Op::Scale { x, factor } => {
                if self.rg(*x) {
                    let dx = self.acc(grads, *x);
                    for (d, gi) in dx.iter_mut().zip(g) {
                        *d += gi * factor;
                    }
                }
            }
            Op::Sum(x) => {
                if self.rg(*x) {
                    let dx = self.acc(grads, *x);
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Gather { table, ids } => {
                if self.rg(*table) {
                    let d = self.value(*table).cols();
                    let dt = self.acc(grads, *table);
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                rstd,
            } => {
                let xv = self.value(*x);
                let gv = self.value(*gain).data();
                let n = xv.cols();
                let mut xhat = vec![0.0; n];
                let mut dxhat = vec![0.0; n];
                for (r, &s) in rstd.iter().enumerate() {
                    let row = xv.row(r);
                    let mean = row.iter().sum::<f64>() / n as f64;
                    let gr = &g[r * n..(r + 1) * n];
                    for j in 0..n {
                        xhat[j] = (row[j] - mean) * s;
                        dxhat[j] = gr[j] * gv[j];
                    }
                    if self.rg(*gain) {
                        let dg = self.acc(grads, *gain);
                        for j in 0..n {
                            dg[j] += gr[j] * xhat[j];
                        }
                    }
                    if self.rg(*bias) {
                        add_into(self.acc(grads, *bias), gr);
                    }
                    if self.rg(*x) {
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                        let dx = &mut self.acc(grads, *x)[r * n..(r + 1) * n];
                        let nf = n as f64;
                        for j in 0..n {
                            dx[j] += s / nf * (nf * dxhat[j] - sum_d - xhat[j] * sum_dx);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if self.rg(*x) {
                    let xv = self.value(*x).data();
                    let dx = self.acc(grads, *x);
                    for ((d, gi), &v) in dx.iter_mut().zip(g).zip(xv) {
                        *d += gi * gelu_grad(v);
                    }
                }
            }
            Op::Softmax { x } => {
                if self.rg(*x) {
                    let y = &self.nodes[idx].value;
                    let n = y.cols();
                    let dx = self.acc(grads, *x);
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        let dxr = &mut dx[r * n..(r + 1) * n];
                        for j in 0..n {
                            dxr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                if self.rg(*x) {
                    let n = self.value(*x).cols();
                    let w = self.nodes[idx].value.cols();
                    let dx = self.acc(grads, *x);
                    for (r, gr) in g.chunks(w).enumerate() {
                        add_into(&mut dx[r * n + start..r * n + start + w], gr);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let width = self.nodes[idx].value.cols();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if self.rg(*p) {
                        let dp = self.acc(grads, *p);
                        for (r, gr) in g.chunks(width).enumerate() {
                            add_into(&mut dp[r * w..(r + 1) * w], &gr[offset..offset + w]);
                        }
                    }
                    offset += w;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                scale,
            } => {
                if self.rg(*logits) {
                    let v = self.value(*logits).cols();
                    let f = g[0] * scale;
                    let dl = self.acc(grads, *logits);
                    for (d, p) in dl.iter_mut().zip(probs) {
                        *d += f * p;
                    }
                    for (r, &t) in targets.iter().enumerate() {
                        dl[r * v + t] -= f;
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Writes `softmax(src)` into `dst` and returns `logsumexp(src)`.
pub(crate) fn softmax_into(src: &[f64], dst: &mut [f64]) -> f64 {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        total += *d;
    }
    for d in dst.iter_mut() {
        *d /= total;
    }
    max + total.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_sum_gradient() {
        let x = Tensor::scalar(3.0);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x, true);
        let sq = tape.mul(xv, xv).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(xv).unwrap().data(), &[6.0]);
    }

    #[test]
    fn uniform_cross_entropy_is_ln_v() {
        for v in [2usize, 7, 513] {
            let logits = Tensor::zeros(&[3, v]);
            let mut tape = Tape::new();
            let l = tape.leaf(&logits, false);
            let loss = tape.cross_entropy(l, &[0, v - 1, v / 2], 1.0 / 3.0).unwrap();
            let got = tape.value(loss).item().unwrap();
            assert!((got - (v as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let x = Tensor::zeros(&[2, 2]);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x, true);
        assert!(matches!(tape.backward(xv), Err(Error::Shape(_))));
    }

    #[test]
    fn nan_is_reported() {
        let x = Tensor::from_vec(&[2], vec![f64::NAN, 1.0]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.leaf(&x, true);
        let sq = tape.mul(xv, xv).unwrap();
        let loss = tape.sum(sq);
        assert!(matches!(tape.backward(loss), Err(Error::Numerical(_))));
    }

    #[test]
    fn causal_softmax_rows_sum_to_one_and_mask() {
        let x = Tensor::from_vec(&[3, 3], vec![0.3, 9.0, -2.0, 1.0, 2.0, 5.0, -1.0, 0.5, 4.0])
            .unwrap();
        let mut tape = Tape::new();
        let xv = tape.leaf(&x, false);
        let y = tape.causal_softmax(xv).unwrap();
        let y = tape.value(y);
        assert_eq!(y.get(0, 0), 1.0);
        assert_eq!(y.get(0, 1), 0.0);
        assert_eq!(y.get(1, 2), 0.0);
        for r in 0..3 {
            let s: f64 = y.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(y.row(r).iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let a = Tensor::full(&[2, 2], 1.0);
        let b = Tensor::full(&[2, 2], 2.0);
        let mut tape = Tape::new();
        let av = tape.leaf(&a, true);
        let bv = tape.leaf(&b, false);
        let p = tape.matmul(av, bv).unwrap();
        let loss = tape.sum(p);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(av).is_some());
        assert!(grads.get(bv).is_none());
    }
}
