//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records operations in execution order; every operand of a node
//! was recorded before it, so a reverse sweep over the node list is a valid
//! topological order. Each op kind carries an exhaustively tested backward
//! rule. Gradients accumulate across `backward` calls until
//! [`Tape::zero_grads`].

use crate::error::{Error, Result};
use crate::numerics::{self, dot, matmul, matmul_nt, matmul_tn, sigmoid, Matrix};

/// Fill value for masked router logits. Finite, but far enough below any
/// real logit that `exp` underflows to exactly zero inside a softmax.
pub const MASKED_LOGIT: f64 = -1e30;

const RMS_EPS: f64 = 1e-6;

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
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Silu(Var),
    RowSoftmax(Var),
    Gather {
        src: Var,
        idx: Vec<usize>,
    },
    ScatterRows {
        src: Var,
        idx: Vec<usize>,
    },
    ScaleRows {
        x: Var,
        gates: Var,
        col: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Matrix,
    },
    Mse(Var, Var),
    Scale(Var, f64),
    MaskedAssign {
        x: Var,
        keep: Vec<bool>,
    },
    RmsNorm {
        x: Var,
        inv_rms: Vec<f64>,
    },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<usize>,
        probs: Vec<Vec<f64>>,
    },
}

struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Matrix>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        debug_assert!(value.is_finite(), "non-finite value from {op:?}");
        self.nodes.push(Node { value, op });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient, zeros if `v` was never reached.
    pub fn grad(&self, v: Var) -> Matrix {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.value(v).shape();
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`; used with weights stored output-major.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul_nt(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::MatMulNt(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = numerics::silu(self.value(a));
        self.push(value, Op::Silu(a))
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let value = numerics::row_softmax(self.value(a));
        self.push(value, Op::RowSoftmax(a))
    }

    /// Row gather: embedding lookup when `src` is an embedding table.
    pub fn gather(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let s = self.value(src);
        if let Some(&bad) = idx.iter().find(|&&i| i >= s.rows()) {
            return Err(Error::shape(format!(
                "gather index {bad} out of range for {} rows",
                s.rows()
            )));
        }
        let value = s.gather_rows(idx);
        Ok(self.push(
            value,
            Op::Gather {
                src,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Adjoint of `gather`: `out[idx[r]] += src[r]`, output has `rows` rows.
    pub fn scatter_rows(&mut self, src: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let s = self.value(src);
        if s.rows() != idx.len() {
            return Err(Error::shape(format!(
                "scatter of {} rows with {} indices",
                s.rows(),
                idx.len()
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::shape(format!(
                "scatter index {bad} out of range for {rows} rows"
            )));
        }
        let mut value = Matrix::zeros(rows, s.cols());
        for (r, &i) in idx.iter().enumerate() {
            for (o, v) in value.row_mut(i).iter_mut().zip(s.row(r)) {
                *o += v;
            }
        }
        Ok(self.push(
            value,
            Op::ScatterRows {
                src,
                idx: idx.to_vec(),
            },
        ))
    }

    /// `out[r, :] = x[r, :] * gates[r, col]`.
    pub fn scale_rows(&mut self, x: Var, gates: Var, col: usize) -> Result<Var> {
        let (xv, gv) = (self.value(x), self.value(gates));
        if xv.rows() != gv.rows() || col >= gv.cols() {
            return Err(Error::shape(format!(
                "scale_rows: x {}x{}, gates {}x{}, column {col}",
                xv.rows(),
                xv.cols(),
                gv.rows(),
                gv.cols()
            )));
        }
        let mut value = xv.clone();
        for r in 0..value.rows() {
            let g = gv[(r, col)];
            value.row_mut(r).iter_mut().for_each(|v| *v *= g);
        }
        Ok(self.push(value, Op::ScaleRows { x, gates, col }))
    }

    /// Mean next-token cross-entropy (natural log), 1x1.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rows() != targets.len() {
            return Err(Error::shape(format!(
                "cross-entropy: {} logit rows, {} targets",
                lv.rows(),
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= lv.cols()) {
            return Err(Error::Input(format!(
                "target {bad} outside vocabulary of {}",
                lv.cols()
            )));
        }
        let probs = numerics::row_softmax(lv);
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            total += log_softmax_at(lv.row(r), t);
        }
        let n = targets.len().max(1) as f64;
        Ok(self.push(
            Matrix::scalar(-total / n),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Mean of squared differences over all entries, 1x1.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let diff = self.value(a).sub(self.value(b))?;
        let n = diff.len().max(1) as f64;
        let value = diff.data().iter().map(|d| d * d).sum::<f64>() / n;
        Ok(self.push(Matrix::scalar(value), Op::Mse(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).scale(factor);
        self.push(value, Op::Scale(a, factor))
    }

    /// Keeps entries where `keep` is true and writes `fill` elsewhere.
    /// Gradient flows only through kept entries.
    pub fn masked_assign(&mut self, x: Var, keep: &[bool], fill: f64) -> Result<Var> {
        let xv = self.value(x);
        if keep.len() != xv.len() {
            return Err(Error::shape(format!(
                "mask of {} entries for a {}x{} value",
                keep.len(),
                xv.rows(),
                xv.cols()
            )));
        }
        let mut value = xv.clone();
        for (v, &k) in value.data_mut().iter_mut().zip(keep) {
            if !k {
                *v = fill;
            }
        }
        Ok(self.push(
            value,
            Op::MaskedAssign {
                x,
                keep: keep.to_vec(),
            },
        ))
    }

    /// Row-wise RMS normalization without a learned gain.
    pub fn rms_norm(&mut self, x: Var) -> Var {
        let (value, inv_rms) = rms_norm_forward(self.value(x));
        self.push(value, Op::RmsNorm { x, inv_rms })
    }

    /// Multi-head causal self-attention over stacked sequences. `segments`
    /// lists the length of each sequence; rows of `q`, `k`, `v` are the
    /// concatenated tokens.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[usize],
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() {
            return Err(Error::shape("attention q/k/v shapes differ"));
        }
        if heads == 0 || qv.cols() % heads != 0 {
            return Err(Error::shape(format!(
                "width {} not divisible by {heads} heads",
                qv.cols()
            )));
        }
        if segments.iter().sum::<usize>() != qv.rows() {
            return Err(Error::shape("attention segments do not cover all rows"));
        }
        let (value, probs) = attention_forward(qv, kv, vv, heads, segments);
        Ok(self.push(
            value,
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                segments: segments.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`, adding into the stored gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).shape() != (1, 1) {
            let (r, c) = self.value(loss).shape();
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {r}x{c}"
            )));
        }
        let mut local: Vec<Option<Matrix>> = (0..=loss.0).map(|_| None).collect();
        local[loss.0] = Some(Matrix::scalar(1.0));
        for id in (0..=loss.0).rev() {
            let Some(upstream) = local[id].take() else {
                continue;
            };
            self.propagate(id, &upstream, &mut local)?;
            match &mut self.grads[id] {
                Some(g) => g.add_assign(&upstream),
                slot @ None => *slot = Some(upstream),
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, dy: &Matrix, local: &mut [Option<Matrix>]) -> Result<()> {
        let node = &self.nodes[id];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                accumulate(local, *a, matmul_nt(dy, val(*b))?);
                accumulate(local, *b, matmul_tn(val(*a), dy)?);
            }
            Op::MatMulNt(a, b) => {
                accumulate(local, *a, matmul(dy, val(*b))?);
                accumulate(local, *b, matmul_tn(dy, val(*a))?);
            }
            Op::Add(a, b) => {
                accumulate(local, *a, dy.clone());
                accumulate(local, *b, dy.clone());
            }
            Op::Mul(a, b) => {
                accumulate(local, *a, dy.hadamard(val(*b))?);
                accumulate(local, *b, dy.hadamard(val(*a))?);
            }
            Op::Silu(a) => {
                let d = val(*a).map(|x| {
                    let s = sigmoid(x);
                    s * (1.0 + x * (1.0 - s))
                });
                accumulate(local, *a, dy.hadamard(&d)?);
            }
            Op::RowSoftmax(a) => {
                let y = &node.value;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let inner = dot(dy.row(r), y.row(r));
                    for ((o, &g), &p) in dx.row_mut(r).iter_mut().zip(dy.row(r)).zip(y.row(r)) {
                        *o = p * (g - inner);
                    }
                }
                accumulate(local, *a, dx);
            }
            Op::Gather { src, idx } => {
                let s = val(*src);
                let mut ds = Matrix::zeros(s.rows(), s.cols());
                for (r, &i) in idx.iter().enumerate() {
                    for (o, g) in ds.row_mut(i).iter_mut().zip(dy.row(r)) {
                        *o += g;
                    }
                }
                accumulate(local, *src, ds);
            }
            Op::ScatterRows { src, idx } => {
                accumulate(local, *src, dy.gather_rows(idx));
            }
            Op::ScaleRows { x, gates, col } => {
                let (xv, gv) = (val(*x), val(*gates));
                let mut dx = dy.clone();
                let mut dg = Matrix::zeros(gv.rows(), gv.cols());
                for r in 0..xv.rows() {
                    let g = gv[(r, *col)];
                    dx.row_mut(r).iter_mut().for_each(|v| *v *= g);
                    dg[(r, *col)] = dot(dy.row(r), xv.row(r));
                }
                accumulate(local, *x, dx);
                accumulate(local, *gates, dg);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let scale = dy.item() / targets.len().max(1) as f64;
                let mut dl = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    dl[(r, t)] -= 1.0;
                }
                dl.data_mut().iter_mut().for_each(|v| *v *= scale);
                accumulate(local, *logits, dl);
            }
            Op::Mse(a, b) => {
                let diff = val(*a).sub(val(*b))?;
                let scale = 2.0 * dy.item() / diff.len().max(1) as f64;
                let da = diff.scale(scale);
                accumulate(local, *b, da.scale(-1.0));
                accumulate(local, *a, da);
            }
            Op::Scale(a, factor) => {
                accumulate(local, *a, dy.scale(*factor));
            }
            Op::MaskedAssign { x, keep } => {
                let mut dx = dy.clone();
                for (g, &k) in dx.data_mut().iter_mut().zip(keep) {
                    if !k {
                        *g = 0.0;
                    }
                }
                accumulate(local, *x, dx);
            }
            Op::RmsNorm { x, inv_rms } => {
                let xv = val(*x);
                let d = xv.cols() as f64;
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    let rr = inv_rms[r];
                    let proj = dot(dy.row(r), xv.row(r)) * rr * rr * rr / d;
                    for ((o, &g), &xi) in dx.row_mut(r).iter_mut().zip(dy.row(r)).zip(xv.row(r)) {
                        *o = rr * g - xi * proj;
                    }
                }
                accumulate(local, *x, dx);
            }
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            } => {
                let (dq, dk, dv) =
                    attention_backward(val(*q), val(*k), val(*v), dy, *heads, segments, probs);
                accumulate(local, *q, dq);
                accumulate(local, *k, dk);
                accumulate(local, *v, dv);
            }
        }
        Ok(())
    }
}

fn accumulate(local: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut local[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn log_softmax_at(row: &[f64], t: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row[t] - lse
}

pub(crate) fn rms_norm_forward(x: &Matrix) -> (Matrix, Vec<f64>) {
    let mut out = x.clone();
    let d = x.cols() as f64;
    let mut inv = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d;
        let s = 1.0 / (ms + RMS_EPS).sqrt();
        row.iter_mut().for_each(|v| *v *= s);
        inv.push(s);
    }
    (out, inv)
}

pub(crate) fn attention_forward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    heads: usize,
    segments: &[usize],
) -> (Matrix, Vec<Vec<f64>>) {
    let d = q.cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Matrix::zeros(q.rows(), d);
    let mut all_probs = Vec::with_capacity(segments.len() * heads);
    let mut offset = 0;
    for &len in segments {
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let mut p = vec![0.0; len * len];
            for i in 0..len {
                let qi = &q.row(offset + i)[cols.clone()];
                let row = &mut p[i * len..i * len + i + 1];
                for (j, s) in row.iter_mut().enumerate() {
                    *s = dot(qi, &k.row(offset + j)[cols.clone()]) * scale;
                }
                numerics::softmax_in_place(row);
                let out_row = &mut out.row_mut(offset + i)[cols.clone()];
                for (j, &pij) in row.iter().enumerate() {
                    for (o, vv) in out_row.iter_mut().zip(&v.row(offset + j)[cols.clone()]) {
                        *o += pij * vv;
                    }
                }
            }
            all_probs.push(p);
        }
        offset += len;
    }
    (out, all_probs)
}

fn attention_backward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    dy: &Matrix,
    heads: usize,
    segments: &[usize],
    probs: &[Vec<f64>],
) -> (Matrix, Matrix, Matrix) {
    let d = q.cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Matrix::zeros(q.rows(), d);
    let mut dk = Matrix::zeros(q.rows(), d);
    let mut dv = Matrix::zeros(q.rows(), d);
    let mut offset = 0;
    let mut dp = Vec::new();
    for (s, &len) in segments.iter().enumerate() {
        for h in 0..heads {
            let p = &probs[s * heads + h];
            let cols = h * dh..(h + 1) * dh;
            for i in 0..len {
                let dyi = &dy.row(offset + i)[cols.clone()];
                dp.clear();
                for j in 0..=i {
                    dp.push(dot(dyi, &v.row(offset + j)[cols.clone()]));
                    let pij = p[i * len + j];
                    for (o, g) in dv.row_mut(offset + j)[cols.clone()].iter_mut().zip(dyi) {
                        *o += pij * g;
                    }
                }
                let inner: f64 = (0..=i).map(|j| p[i * len + j] * dp[j]).sum();
                for j in 0..=i {
                    let ds = p[i * len + j] * (dp[j] - inner) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &k.row(offset + j)[cols.clone()];
                    for (o, kk) in dq.row_mut(offset + i)[cols.clone()].iter_mut().zip(kj) {
                        *o += ds * kk;
                    }
                    let qi = &q.row(offset + i)[cols.clone()];
                    for (o, qq) in dk.row_mut(offset + j)[cols.clone()].iter_mut().zip(qi) {
                        *o += ds * qq;
                    }
                }
            }
        }
        offset += len;
    }
    (dq, dk, dv)
}

/// Max over entries of `|analytic − central difference| / max(1, |analytic|)`
/// for the scalar function `f` at `x`.
pub fn grad_check<F>(f: F, x: &Matrix, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Config(format!("eps {eps} outside (0, 1e-2]")));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let loss = f(&mut tape, xv)?;
    tape.backward(loss)?;
    let analytic = tape.grad(xv);

    let eval = |m: Matrix| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf(m);
        let l = f(&mut t, v)?;
        Ok(t.value(l).item())
    };
    let mut worst = 0.0_f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;

    fn rand4(seed: u64) -> Matrix {
        SeededRng::new(seed).gaussian_matrix(4, 4, 1.0)
    }

    fn sum_all(t: &mut Tape, v: Var) -> Result<Var> {
        // Weighted sum so that every output entry matters differently.
        let (r, c) = t.value(v).shape();
        let w = t.leaf(SeededRng::new(777).gaussian_matrix(r, c, 1.0));
        let zero = t.leaf(Matrix::zeros(r, c));
        let prod = t.mul(v, w)?;
        t.mse(prod, zero)
    }

    #[test]
    fn forward_identities() {
        let a = rand4(1);
        let mut t = Tape::new();
        let av = t.leaf(a.clone());
        let z = t.leaf(Matrix::zeros(4, 4));
        let i = t.leaf(Matrix::identity(4));
        let s = t.add(av, z).unwrap();
        assert_eq!(t.value(s), &a);
        let p = t.matmul(av, i).unwrap();
        assert_eq!(t.value(p), &a);
        let x = t.leaf(Matrix::scalar(3.0));
        let xx = t.mul(x, x).unwrap();
        assert_eq!(t.value(xx).item(), 9.0);
    }

    #[test]
    fn square_derivative() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::scalar(3.0));
        let xx = t.mul(x, x).unwrap();
        t.backward(xx).unwrap();
        assert_eq!(t.grad(x).item(), 6.0);
    }

    #[test]
    fn mse_of_identical_inputs_has_zero_gradient() {
        let a = rand4(2);
        let mut t = Tape::new();
        let x = t.leaf(a.clone());
        let y = t.leaf(a);
        let l = t.mse(x, y).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).max_abs(), 0.0);
        assert_eq!(t.grad(y).max_abs(), 0.0);
    }

    #[test]
    fn cross_entropy_gradient_matches_closed_form() {
        let n = 3;
        let vocab = 5;
        let targets = [0usize, 3, 4];
        let mut t = Tape::new();
        let logits = t.leaf(Matrix::zeros(n, vocab));
        let l = t.cross_entropy(logits, &targets).unwrap();
        assert!((t.value(l).item() - (vocab as f64).ln()).abs() < 1e-15);
        t.backward(l).unwrap();
        let g = t.grad(logits);
        for r in 0..n {
            for c in 0..vocab {
                let onehot = if targets[r] == c { 1.0 } else { 0.0 };
                let expected = (0.2 - onehot) / n as f64;
                assert!((g[(r, c)] - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::zeros(2, 2));
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_vars_keep_zero_grad() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::scalar(2.0));
        let unused = t.leaf(Matrix::scalar(5.0));
        let y = t.scale(x, 3.0);
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).item(), 3.0);
        assert_eq!(t.grad(unused).item(), 0.0);
    }

    #[test]
    fn grad_check_sum_of_squares() {
        let x = rand4(3);
        let err = grad_check(
            |t, v| {
                let z = t.leaf(Matrix::zeros(4, 4));
                let m = t.mse(v, z)?;
                Ok(t.scale(m, 16.0))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "{err:e}");
    }

    #[test]
    fn grad_check_every_op_kind() {
        let eps = 1e-5;
        let other = rand4(10);
        let checks: Vec<(&str, Box<dyn Fn(&mut Tape, Var) -> Result<Var>>)> = vec![
            (
                "matmul-left",
                Box::new(|t, v| {
                    let b = t.leaf(rand4(10));
                    let y = t.matmul(v, b)?;
                    sum_all(t, y)
                }),
            ),
            (
                "matmul-right",
                Box::new(|t, v| {
                    let a = t.leaf(rand4(11));
                    let y = t.matmul(a, v)?;
                    sum_all(t, y)
                }),
            ),
            (
                "matmul-nt",
                Box::new(|t, v| {
                    let a = t.leaf(rand4(12));
                    let y = t.matmul_nt(a, v)?;
                    let y2 = t.matmul_nt(v, y)?;
                    sum_all(t, y2)
                }),
            ),
            (
                "add",
                Box::new(|t, v| {
                    let b = t.leaf(rand4(13));
                    let y = t.add(v, b)?;
                    let y = t.add(y, v)?;
                    sum_all(t, y)
                }),
            ),
            (
                "mul",
                Box::new(|t, v| {
                    let y = t.mul(v, v)?;
                    sum_all(t, y)
                }),
            ),
            (
                "silu",
                Box::new(|t, v| {
                    let y = t.silu(v);
                    sum_all(t, y)
                }),
            ),
            (
                "row-softmax",
                Box::new(|t, v| {
                    let y = t.row_softmax(v);
                    sum_all(t, y)
                }),
            ),
            (
                "gather",
                Box::new(|t, v| {
                    let y = t.gather(v, &[3, 0, 3, 1, 2])?;
                    sum_all(t, y)
                }),
            ),
            (
                "scatter",
                Box::new(|t, v| {
                    let y = t.scatter_rows(v, &[5, 0, 5, 2], 6)?;
                    sum_all(t, y)
                }),
            ),
            (
                "scale-rows",
                Box::new(|t, v| {
                    let x = t.leaf(rand4(14));
                    let y = t.scale_rows(x, v, 2)?;
                    let y = t.scale_rows(y, v, 0)?;
                    sum_all(t, y)
                }),
            ),
            (
                "cross-entropy",
                Box::new(|t, v| t.cross_entropy(v, &[1, 0, 3, 3])),
            ),
            (
                "mse",
                Box::new(|t, v| {
                    let b = t.leaf(rand4(15));
                    t.mse(v, b)
                }),
            ),
            (
                "scale",
                Box::new(|t, v| {
                    let y = t.scale(v, -2.5);
                    sum_all(t, y)
                }),
            ),
            (
                "masked-assign",
                Box::new(|t, v| {
                    let keep: Vec<bool> = (0..16).map(|i| i % 3 != 0).collect();
                    let y = t.masked_assign(v, &keep, 0.0)?;
                    sum_all(t, y)
                }),
            ),
            (
                "rms-norm",
                Box::new(|t, v| {
                    let y = t.rms_norm(v);
                    sum_all(t, y)
                }),
            ),
            (
                "attention",
                Box::new(|t, v| {
                    let k = t.leaf(rand4(16));
                    let vv = t.leaf(rand4(17));
                    let y = t.causal_attention(v, k, vv, 2, &[3, 1])?;
                    let y2 = t.causal_attention(k, v, v, 1, &[4])?;
                    let s = t.add(y, y2)?;
                    sum_all(t, s)
                }),
            ),
        ];
        for (seed, (name, f)) in checks.iter().enumerate() {
            let x = rand4(100 + seed as u64).add(&other.scale(0.1)).unwrap();
            let err = grad_check(f, &x, eps).unwrap();
            assert!(err < 1e-4, "{name}: relative error {err:e}");
        }
    }

    #[test]
    fn masked_positions_receive_no_gradient() {
        let mut t = Tape::new();
        let w = t.leaf(rand4(4));
        let keep: Vec<bool> = (0..16).map(|i| i % 2 == 0).collect();
        let masked = t.masked_assign(w, &keep, 0.0).unwrap();
        for (v, &k) in t.value(masked).data().iter().zip(&keep) {
            if !k {
                assert_eq!(*v, 0.0);
            }
        }
        let x = t.leaf(rand4(5));
        let y = t.matmul(x, masked).unwrap();
        let l = sum_all(&mut t, y).unwrap();
        t.backward(l).unwrap();
        for (g, &k) in t.grad(w).data().iter().zip(&keep) {
            if !k {
                assert_eq!(*g, 0.0);
            }
        }
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let build = |t: &mut Tape| -> (Var, Var, Var) {
            let x = t.leaf(rand4(6));
            let s = t.silu(x);
            let l1 = sum_all(t, s).unwrap();
            let sm = t.row_softmax(x);
            let tgt = t.leaf(rand4(7));
            let l2 = t.mse(sm, tgt).unwrap();
            (x, l1, l2)
        };
        let mut separate = Tape::new();
        let (x, l1, l2) = build(&mut separate);
        separate.backward(l1).unwrap();
        separate.backward(l2).unwrap();

        let mut joint = Tape::new();
        let (xj, l1j, l2j) = build(&mut joint);
        let total = joint.add(l1j, l2j).unwrap();
        joint.backward(total).unwrap();
        assert!(separate.grad(x).max_abs_diff(&joint.grad(xj)) < 1e-12);
    }

    #[test]
    fn causal_attention_ignores_future_tokens() {
        let mut rng = SeededRng::new(8);
        let q = rng.gaussian_matrix(4, 4, 1.0);
        let k = rng.gaussian_matrix(4, 4, 1.0);
        let v = rng.gaussian_matrix(4, 4, 1.0);
        let (full, _) = attention_forward(&q, &k, &v, 2, &[4]);
        let mut v2 = v.clone();
        v2.row_mut(3).iter_mut().for_each(|x| *x += 10.0);
        let mut k2 = k.clone();
        k2.row_mut(3).iter_mut().for_each(|x| *x -= 3.0);
        let (perturbed, _) = attention_forward(&q, &k2, &v2, 2, &[4]);
        for r in 0..3 {
            assert_eq!(full.row(r), perturbed.row(r));
        }
        // The first token can only attend to itself.
        assert!(full
            .row(0)
            .iter()
            .zip(v.row(0))
            .all(|(a, b)| (a - b).abs() < 1e-15));
    }
}
