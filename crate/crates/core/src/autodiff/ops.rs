//! Operator forward rules (as `Graph` methods) and their backward rules.
//!
//! Shape misuse is a programming error and panics with the offending
//! shapes.

use super::{backward_corrupted, Graph, Tensor, Var};

/// Target value that excludes a row from the cross-entropy.
pub const IGNORE_INDEX: usize = usize::MAX;

const LN_EPS: f64 = 1e-5;
const ROPE_BASE: f64 = 10000.0;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

/// Batched attention layout: `batch` independent segments, each with
/// `q_len` query rows and `k_len` key/value rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionShape {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
}

pub(crate) enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    ScaleRows(Var, Vec<f64>),
    Exp(Var),
    Gelu(Var),
    Softplus(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, shape: AttentionShape, probs: Vec<f64> },
    Rope { x: Var, positions: Vec<f64> },
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    MeanPoolGroups(Var, usize),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64>, scale: f64 },
    SumSqRows(Var),
    MeanAll(Var),
    CosineRows { a: Var, b: Var },
    GaussianKl { mu: Var, logvar: Var, prior_var: f64 },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::Scale(..) => "scale",
            Op::ScaleRows(..) => "scale_rows",
            Op::Exp(..) => "exp",
            Op::Gelu(..) => "gelu",
            Op::Softplus(..) => "softplus",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Attention { .. } => "attention",
            Op::Rope { .. } => "rope",
            Op::GatherRows(..) => "gather_rows",
            Op::ConcatRows(..) => "concat_rows",
            Op::MeanPoolGroups(..) => "mean_pool_groups",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::SumSqRows(..) => "sum_sq_rows",
            Op::MeanAll(..) => "mean_all",
            Op::CosineRows { .. } => "cosine_rows",
            Op::GaussianKl { .. } => "gaussian_kl",
        }
    }
}

/// `C = alpha·A·B + beta·C` over strided views; bounds are checked before
/// handing raw pointers to the kernel.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let extent = |r: usize, cc: usize, rs: usize, cs: usize| (r - 1) * rs + (cc - 1) * cs + 1;
    assert!(c.len() >= extent(m, n, rsc, csc), "gemm output out of bounds");
    if k == 0 {
        c.iter_mut().for_each(|x| *x *= beta);
        return;
    }
    assert!(a.len() >= extent(m, k, rsa, csa), "gemm lhs out of bounds");
    assert!(b.len() >= extent(k, n, rsb, csb), "gemm rhs out of bounds");
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        row.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    row.iter_mut().for_each(|x| *x /= sum);
}

fn rope_angle(pos: f64, pair: usize, dim: usize) -> f64 {
    pos * ROPE_BASE.powf(-2.0 * pair as f64 / dim as f64)
}

impl Graph {
    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.requires_grad(v))
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let ((m, k), (k2, n)) = (self.dims(a), self.dims(b));
        assert_eq!(k, k2, "matmul inner dims {m}x{k} · {k2}x{n}");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, &self.value(a).data, (k, 1), &self.value(b).data, (n, 1), 0.0, &mut out, (n, 1));
        let rg = self.rg(&[a, b]);
        self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b), rg)
    }

    fn zip_same(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape, tb.shape, "{} shapes differ", op.name());
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(ta.shape.clone(), data);
        let rg = self.rg(&[a, b]);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `[1, cols]` row to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let (r, c) = self.dims(x);
        assert_eq!(self.value(bias).len(), c, "bias width");
        let b = &self.value(bias).data;
        let data = self.value(x).data.iter().enumerate().map(|(i, &v)| v + b[i % c]).collect();
        let rg = self.rg(&[x, bias]);
        self.push(Tensor::matrix(r, c, data), Op::AddBias(x, bias), rg)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_bias(y, b)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.value(x);
        let t = Tensor::new(t.shape.clone(), t.data.iter().map(|v| v * s).collect());
        let rg = self.rg(&[x]);
        self.push(t, Op::Scale(x, s), rg)
    }

    /// Multiplies row `i` by the constant `s[i]`.
    pub fn scale_rows(&mut self, x: Var, s: &[f64]) -> Var {
        let (r, c) = self.dims(x);
        assert_eq!(s.len(), r, "scale_rows factor count");
        let data = self.value(x).data.iter().enumerate().map(|(i, &v)| v * s[i / c]).collect();
        let rg = self.rg(&[x]);
        self.push(Tensor::matrix(r, c, data), Op::ScaleRows(x, s.to_vec()), rg)
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let t = Tensor::new(t.shape.clone(), t.data.iter().map(|&v| f(v)).collect());
        let rg = self.rg(&[x]);
        self.push(t, op, rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, f64::exp, Op::Exp(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, gelu, Op::Gelu(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.map(x, softplus, Op::Softplus(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let mut data = self.value(x).data.clone();
        data.chunks_mut(c.max(1)).for_each(softmax_in_place);
        let rg = self.rg(&[x]);
        self.push(Tensor::matrix(r, c, data), Op::SoftmaxRows(x), rg)
    }

    /// Per-row normalization followed by `gamma ⊙ x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (r, c) = self.dims(x);
        assert!(self.value(gamma).len() == c && self.value(beta).len() == c, "layer_norm affine width");
        let (g, b) = (&self.value(gamma).data, &self.value(beta).data);
        let xs = &self.value(x).data;
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = g[j] * h + b[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        self.push(Tensor::matrix(r, c, out), Op::LayerNorm { x, gamma, beta, xhat, inv_std }, rg)
    }

    /// Multi-head scaled dot-product attention. `key_mask`, when given,
    /// has one flag per key row (`batch · k_len`); masked keys get zero
    /// weight.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, shape: AttentionShape, key_mask: Option<&[bool]>) -> Var {
        let AttentionShape { batch, q_len, k_len, heads } = shape;
        let (qr, d) = self.dims(q);
        let (kr, dk) = self.dims(k);
        let (vr, dv) = self.dims(v);
        assert!(qr == batch * q_len && kr == batch * k_len && vr == kr, "attention rows q={qr} k={kr} v={vr} for {shape:?}");
        assert!(d == dk && d == dv && heads > 0 && d % heads == 0, "attention widths q={d} k={dk} v={dv} heads={heads}");
        if let Some(m) = key_mask {
            assert_eq!(m.len(), kr, "key mask length");
        }
        let dh = d / heads;
        let sc = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (&self.value(q).data, &self.value(k).data, &self.value(v).data);
        let mut probs = vec![0.0; batch * heads * q_len * k_len];
        let mut out = vec![0.0; qr * d];
        for b in 0..batch {
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * q_len * k_len..][..q_len * k_len];
                let qo = b * q_len * d + h * dh;
                let ko = b * k_len * d + h * dh;
                gemm(q_len, dh, k_len, sc, &qd[qo..], (d, 1), &kd[ko..], (1, d), 0.0, p, (k_len, 1));
                if let Some(m) = key_mask {
                    for row in p.chunks_mut(k_len) {
                        for (c, x) in row.iter_mut().enumerate() {
                            if !m[b * k_len + c] {
                                *x = f64::NEG_INFINITY;
                            }
                        }
                    }
                }
                p.chunks_mut(k_len).for_each(softmax_in_place);
                gemm(q_len, k_len, dh, 1.0, p, (k_len, 1), &vd[ko..], (d, 1), 0.0, &mut out[qo..], (d, 1));
            }
        }
        let rg = self.rg(&[q, k, v]);
        self.push(Tensor::matrix(qr, d, out), Op::Attention { q, k, v, shape, probs }, rg)
    }

    /// Rotary embedding: pair `(2j, 2j+1)` of row `i` rotated by
    /// `positions[i] · 10000^(−2j/d)`.
    pub fn rope(&mut self, x: Var, positions: &[f64]) -> Var {
        let (r, c) = self.dims(x);
        assert!(c % 2 == 0, "rope needs an even width, got {c}");
        assert_eq!(positions.len(), r, "one position per row");
        let xs = &self.value(x).data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c / 2 {
                let (s, co) = rope_angle(positions[i], j, c).sin_cos();
                let (a, b) = (xs[i * c + 2 * j], xs[i * c + 2 * j + 1]);
                out[i * c + 2 * j] = a * co - b * s;
                out[i * c + 2 * j + 1] = a * s + b * co;
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::matrix(r, c, out), Op::Rope { x, positions: positions.to_vec() }, rg)
    }

    /// Rows of `x` picked by index (embedding lookup, broadcast, reorder).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let (r, c) = self.dims(x);
        let xs = &self.value(x).data;
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            assert!(i < r, "gather index {i} out of {r} rows");
            out.extend_from_slice(&xs[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::matrix(idx.len(), c, out), Op::GatherRows(x, idx.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Var {
        let c = self.dims(xs[0]).1;
        let mut out = Vec::new();
        for &x in xs {
            assert_eq!(self.dims(x).1, c, "concat_rows widths differ");
            out.extend_from_slice(&self.value(x).data);
        }
        let r = out.len() / c.max(1);
        let rg = self.rg(xs);
        self.push(Tensor::matrix(r, c, out), Op::ConcatRows(xs.to_vec()), rg)
    }

    /// Means over consecutive groups of `group` rows.
    pub fn mean_pool_groups(&mut self, x: Var, group: usize) -> Var {
        let (r, c) = self.dims(x);
        assert!(group > 0 && r % group == 0, "{r} rows do not split into groups of {group}");
        let xs = &self.value(x).data;
        let mut out = vec![0.0; r / group * c];
        for i in 0..r {
            for j in 0..c {
                out[(i / group) * c + j] += xs[i * c + j] / group as f64;
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::matrix(r / group, c, out), Op::MeanPoolGroups(x, group), rg)
    }

    /// Negative log-softmax of the target class per row; rows targeting
    /// [`IGNORE_INDEX`] are skipped. `Mean` divides by the counted rows.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], reduction: Reduction) -> Var {
        let (r, c) = self.dims(logits);
        assert_eq!(targets.len(), r, "one target per row");
        let mut probs = self.value(logits).data.clone();
        probs.chunks_mut(c).for_each(softmax_in_place);
        let ls = &self.value(logits).data;
        let mut loss = 0.0;
        let mut count = 0usize;
        for (i, &t) in targets.iter().enumerate() {
            if t == IGNORE_INDEX {
                continue;
            }
            assert!(t < c, "target {t} out of {c} classes");
            let row = &ls[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            count += 1;
        }
        let scale = match reduction {
            Reduction::Mean if count > 0 => 1.0 / count as f64,
            Reduction::Mean => 0.0,
            Reduction::Sum => 1.0,
        };
        let rg = self.rg(&[logits]);
        self.push(
            Tensor::scalar(loss * scale),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs, scale },
            rg,
        )
    }

    /// Squared Euclidean norm of each row, `[rows, 1]`.
    pub fn sum_sq_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let xs = &self.value(x).data;
        let out = (0..r).map(|i| xs[i * c..(i + 1) * c].iter().map(|v| v * v).sum()).collect();
        let rg = self.rg(&[x]);
        self.push(Tensor::matrix(r, 1, out), Op::SumSqRows(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.data.iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(m), Op::MeanAll(x), rg)
    }

    /// Mean over rows of `‖a − b‖²`.
    pub fn mse_rows(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let s = self.sum_sq_rows(d);
        self.mean_all(s)
    }

    /// Cosine similarity of matching rows, `[rows, 1]`. Zero rows panic.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Var {
        let (r, c) = self.dims(a);
        assert_eq!(self.dims(b), (r, c), "cosine_rows shapes differ");
        let (xa, xb) = (&self.value(a).data, &self.value(b).data);
        let out = (0..r)
            .map(|i| {
                let (ra, rb) = (&xa[i * c..(i + 1) * c], &xb[i * c..(i + 1) * c]);
                let (na, nb) = (norm(ra), norm(rb));
                assert!(na > 0.0 && nb > 0.0, "cosine of a zero vector");
                dot(ra, rb) / (na * nb)
            })
            .collect();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::matrix(r, 1, out), Op::CosineRows { a, b }, rg)
    }

    /// Mean over rows of `KL(N(mu, exp(logvar)) ‖ N(0, prior_std²))`.
    pub fn gaussian_kl(&mut self, mu: Var, logvar: Var, prior_std: f64) -> Var {
        let (r, c) = self.dims(mu);
        assert_eq!(self.dims(logvar), (r, c), "gaussian_kl shapes differ");
        let pv = prior_std * prior_std;
        let (m, lv) = (&self.value(mu).data, &self.value(logvar).data);
        let total: f64 = m
            .iter()
            .zip(lv)
            .map(|(&m, &lv)| 0.5 * (lv.exp() / pv + m * m / pv - 1.0 - lv + pv.ln()))
            .sum();
        let rg = self.rg(&[mu, logvar]);
        self.push(Tensor::scalar(total / r as f64), Op::GaussianKl { mu, logvar, prior_var: pv }, rg)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn backward(g: &mut Graph, i: usize, grad: &[f64]) {
    let op = std::mem::replace(&mut g.nodes[i].op, Op::Leaf);
    backward_op(g, i, &op, grad);
    g.nodes[i].op = op;
}

fn backward_op(g: &mut Graph, i: usize, op: &Op, gy: &[f64]) {
    match op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let ((m, k), n) = (g.dims(*a), g.dims(*b).1);
            let corrupt = if backward_corrupted() { 1.5 } else { 1.0 };
            if g.requires_grad(*a) {
                let mut da = vec![0.0; m * k];
                gemm(m, n, k, corrupt, gy, (n, 1), &g.value(*b).data, (1, n), 0.0, &mut da, (k, 1));
                g.accumulate(*a, &da);
            }
            if g.requires_grad(*b) {
                let mut db = vec![0.0; k * n];
                gemm(k, m, n, 1.0, &g.value(*a).data, (1, k), gy, (n, 1), 0.0, &mut db, (n, 1));
                g.accumulate(*b, &db);
            }
        }
        Op::Add(a, b) => {
            g.accumulate(*a, gy);
            g.accumulate(*b, gy);
        }
        Op::Sub(a, b) => {
            g.accumulate(*a, gy);
            let neg: Vec<f64> = gy.iter().map(|v| -v).collect();
            g.accumulate(*b, &neg);
        }
        Op::Mul(a, b) => {
            let da: Vec<f64> = gy.iter().zip(&g.value(*b).data).map(|(x, y)| x * y).collect();
            let db: Vec<f64> = gy.iter().zip(&g.value(*a).data).map(|(x, y)| x * y).collect();
            g.accumulate(*a, &da);
            g.accumulate(*b, &db);
        }
        Op::AddBias(x, b) => {
            g.accumulate(*x, gy);
            let c = g.dims(*x).1;
            let mut db = vec![0.0; c];
            for (j, v) in gy.iter().enumerate() {
                db[j % c] += v;
            }
            g.accumulate(*b, &db);
        }
        Op::Scale(x, s) => {
            let d: Vec<f64> = gy.iter().map(|v| v * s).collect();
            g.accumulate(*x, &d);
        }
        Op::ScaleRows(x, s) => {
            let c = g.dims(*x).1;
            let d: Vec<f64> = gy.iter().enumerate().map(|(j, v)| v * s[j / c]).collect();
            g.accumulate(*x, &d);
        }
        Op::Exp(x) => {
            let d: Vec<f64> = gy.iter().zip(&g.value(Var(i)).data).map(|(a, y)| a * y).collect();
            g.accumulate(*x, &d);
        }
        Op::Gelu(x) => {
            let d: Vec<f64> = gy.iter().zip(&g.value(*x).data).map(|(a, &v)| a * gelu_grad(v)).collect();
            g.accumulate(*x, &d);
        }
        Op::Softplus(x) => {
            let d: Vec<f64> = gy.iter().zip(&g.value(*x).data).map(|(a, &v)| a * sigmoid(v)).collect();
            g.accumulate(*x, &d);
        }
        Op::SoftmaxRows(x) => {
            let c = g.dims(*x).1;
            let y = &g.value(Var(i)).data;
            let mut d = vec![0.0; y.len()];
            for r in 0..y.len() / c.max(1) {
                let (yr, gr) = (&y[r * c..(r + 1) * c], &gy[r * c..(r + 1) * c]);
                let s = dot(yr, gr);
                for j in 0..c {
                    d[r * c + j] = yr[j] * (gr[j] - s);
                }
            }
            g.accumulate(*x, &d);
        }
        Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
            let (r, c) = g.dims(*x);
            let gm = &g.value(*gamma).data;
            let mut dx = vec![0.0; r * c];
            let mut dg = vec![0.0; c];
            let mut db = vec![0.0; c];
            for row in 0..r {
                let o = row * c;
                let mut mean_d = 0.0;
                let mut mean_dx = 0.0;
                for j in 0..c {
                    let dh = gy[o + j] * gm[j];
                    mean_d += dh;
                    mean_dx += dh * xhat[o + j];
                    dg[j] += gy[o + j] * xhat[o + j];
                    db[j] += gy[o + j];
                }
                mean_d /= c as f64;
                mean_dx /= c as f64;
                for j in 0..c {
                    let dh = gy[o + j] * gm[j];
                    dx[o + j] = inv_std[row] * (dh - mean_d - xhat[o + j] * mean_dx);
                }
            }
            g.accumulate(*x, &dx);
            g.accumulate(*gamma, &dg);
            g.accumulate(*beta, &db);
        }
        Op::Attention { q, k, v, shape, probs } => {
            let AttentionShape { batch, q_len, k_len, heads } = *shape;
            let d = g.dims(*q).1;
            let dh = d / heads;
            let sc = 1.0 / (dh as f64).sqrt();
            let (qd, kd, vd) = (&g.value(*q).data, &g.value(*k).data, &g.value(*v).data);
            let mut dq = vec![0.0; qd.len()];
            let mut dk = vec![0.0; kd.len()];
            let mut dv = vec![0.0; vd.len()];
            let mut dp = vec![0.0; q_len * k_len];
            for b in 0..batch {
                for h in 0..heads {
                    let p = &probs[(b * heads + h) * q_len * k_len..][..q_len * k_len];
                    let qo = b * q_len * d + h * dh;
                    let ko = b * k_len * d + h * dh;
                    // dV = Pᵀ·dO
                    gemm(k_len, q_len, dh, 1.0, p, (1, k_len), &gy[qo..], (d, 1), 1.0, &mut dv[ko..], (d, 1));
                    // dP = dO·Vᵀ
                    gemm(q_len, dh, k_len, 1.0, &gy[qo..], (d, 1), &vd[ko..], (1, d), 0.0, &mut dp, (k_len, 1));
                    for r in 0..q_len {
                        let (pr, dr) = (&p[r * k_len..(r + 1) * k_len], &mut dp[r * k_len..(r + 1) * k_len]);
                        let s = dot(pr, dr);
                        for c in 0..k_len {
                            dr[c] = pr[c] * (dr[c] - s);
                        }
                    }
                    gemm(q_len, k_len, dh, sc, &dp, (k_len, 1), &kd[ko..], (d, 1), 1.0, &mut dq[qo..], (d, 1));
                    gemm(k_len, q_len, dh, sc, &dp, (1, k_len), &qd[qo..], (d, 1), 1.0, &mut dk[ko..], (d, 1));
                }
            }
            g.accumulate(*q, &dq);
            g.accumulate(*k, &dk);
            g.accumulate(*v, &dv);
        }
        Op::Rope { x, positions } => {
            let (r, c) = g.dims(*x);
            let mut d = vec![0.0; r * c];
            for row in 0..r {
                for j in 0..c / 2 {
                    let (s, co) = rope_angle(positions[row], j, c).sin_cos();
                    let (a, b) = (gy[row * c + 2 * j], gy[row * c + 2 * j + 1]);
                    d[row * c + 2 * j] = a * co + b * s;
                    d[row * c + 2 * j + 1] = -a * s + b * co;
                }
            }
            g.accumulate(*x, &d);
        }
        Op::GatherRows(x, idx) => {
            let (r, c) = g.dims(*x);
            let mut d = vec![0.0; r * c];
            for (o, &src) in idx.iter().enumerate() {
                for j in 0..c {
                    d[src * c + j] += gy[o * c + j];
                }
            }
            g.accumulate(*x, &d);
        }
        Op::ConcatRows(xs) => {
            let mut off = 0;
            for &x in xs {
                let n = g.value(x).len();
                let part = gy[off..off + n].to_vec();
                g.accumulate(x, &part);
                off += n;
            }
        }
        Op::MeanPoolGroups(x, group) => {
            let (r, c) = g.dims(*x);
            let d: Vec<f64> = (0..r * c).map(|e| gy[(e / c / group) * c + e % c] / *group as f64).collect();
            g.accumulate(*x, &d);
        }
        Op::CrossEntropy { logits, targets, probs, scale } => {
            let c = g.dims(*logits).1;
            let mut d = vec![0.0; probs.len()];
            for (r, &t) in targets.iter().enumerate() {
                if t == IGNORE_INDEX {
                    continue;
                }
                for j in 0..c {
                    d[r * c + j] = gy[0] * scale * (probs[r * c + j] - if j == t { 1.0 } else { 0.0 });
                }
            }
            g.accumulate(*logits, &d);
        }
        Op::SumSqRows(x) => {
            let c = g.dims(*x).1;
            let d: Vec<f64> = g.value(*x).data.iter().enumerate().map(|(e, v)| 2.0 * v * gy[e / c]).collect();
            g.accumulate(*x, &d);
        }
        Op::MeanAll(x) => {
            let n = g.value(*x).len();
            let d = vec![gy[0] / n as f64; n];
            g.accumulate(*x, &d);
        }
        Op::CosineRows { a, b } => {
            let (r, c) = g.dims(*a);
            let (xa, xb) = (&g.value(*a).data, &g.value(*b).data);
            let cos = &g.value(Var(i)).data;
            let mut da = vec![0.0; r * c];
            let mut db = vec![0.0; r * c];
            for row in 0..r {
                let o = row * c;
                let (ra, rb) = (&xa[o..o + c], &xb[o..o + c]);
                let (na, nb) = (norm(ra), norm(rb));
                for j in 0..c {
                    da[o + j] = gy[row] * (rb[j] / (na * nb) - cos[row] * ra[j] / (na * na));
                    db[o + j] = gy[row] * (ra[j] / (na * nb) - cos[row] * rb[j] / (nb * nb));
                }
            }
            g.accumulate(*a, &da);
            g.accumulate(*b, &db);
        }
        Op::GaussianKl { mu, logvar, prior_var } => {
            let r = g.dims(*mu).0 as f64;
            let dm: Vec<f64> = g.value(*mu).data.iter().map(|m| gy[0] * m / prior_var / r).collect();
            let dl: Vec<f64> = g.value(*logvar).data.iter().map(|lv| gy[0] * 0.5 * (lv.exp() / prior_var - 1.0) / r).collect();
            g.accumulate(*mu, &dm);
            g.accumulate(*logvar, &dl);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_values() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let b = g.constant(Tensor::from_rows(&[vec![5.0], vec![6.0]]));
        let c = g.matmul(a, b);
        assert_eq!(g.value(c).data, vec![17.0, 39.0]);
        let i = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let x = g.matmul(i, a);
        assert_eq!(g.value(x), g.value(a));
    }

    #[test]
    #[should_panic(expected = "matmul inner dims")]
    fn matmul_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(2, 3));
        let b = g.constant(Tensor::zeros(2, 3));
        g.matmul(a, b);
    }

    #[test]
    fn layer_norm_stats() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![3.0; 5], vec![1.0, -2.0, 0.5, 4.0, 7.0]]));
        let gm = g.constant(Tensor::row(vec![1.0; 5]));
        let bt = g.constant(Tensor::row(vec![0.0; 5]));
        let y = g.layer_norm(x, gm, bt);
        let t = g.value(y);
        assert!(t.row_slice(0).iter().all(|v| v.abs() < 1e-12));
        let r = t.row_slice(1);
        let mean = r.iter().sum::<f64>() / 5.0;
        let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn attention_saturates_and_averages() {
        let mut g = Graph::new();
        let shape = AttentionShape { batch: 1, q_len: 1, k_len: 3, heads: 1 };
        let q = g.constant(Tensor::row(vec![50.0, 0.0]));
        let k = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]]));
        let v = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]));
        let o = g.attention(q, k, v, shape, None);
        assert!((g.value(o).data[0] - 1.0).abs() < 1e-9 && (g.value(o).data[1] - 2.0).abs() < 1e-9);
        let q0 = g.constant(Tensor::row(vec![0.0, 0.0]));
        let o = g.attention(q0, k, v, shape, None);
        assert!((g.value(o).data[0] - 3.0).abs() < 1e-12 && (g.value(o).data[1] - 4.0).abs() < 1e-12);
        let o = g.attention(q0, k, v, shape, Some(&[true, false, true]));
        assert!((g.value(o).data[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn rope_properties() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![0.3, -1.2, 0.7, 2.0]]));
        let y0 = g.rope(x, &[0.0]);
        assert_eq!(g.value(y0), g.value(x));
        let y = g.rope(x, &[5.0]);
        let (a, b) = (g.value(x).data.clone(), g.value(y).data.clone());
        for j in 0..2 {
            let na = a[2 * j].hypot(a[2 * j + 1]);
            let nb = b[2 * j].hypot(b[2 * j + 1]);
            assert!((na - nb).abs() < 1e-12);
        }
    }

    #[test]
    fn rope_relative_phase() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![0.3, -1.2, 0.7, 2.0, 0.1, 0.4]]));
        let y = g.constant(Tensor::from_rows(&[vec![-0.5, 0.8, 1.1, -0.3, 0.9, 0.2]]));
        let inner = |g: &mut Graph, p: f64, q: f64| {
            let a = g.rope(x, &[p]);
            let b = g.rope(y, &[q]);
            dot(&g.value(a).data, &g.value(b).data)
        };
        let base = inner(&mut g, 2.0, 5.0);
        for shift in [1.0, 7.5, 100.0] {
            assert!((inner(&mut g, 2.0 + shift, 5.0 + shift) - base).abs() < 1e-9);
        }
        let same = inner(&mut g, 0.0, 0.0);
        assert!((inner(&mut g, 3.0, 3.0) - same).abs() < 1e-12);
    }

    #[test]
    #[should_panic(expected = "even width")]
    fn rope_rejects_odd() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(1, 3));
        g.rope(x, &[1.0]);
    }

    #[test]
    fn cross_entropy_values() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::zeros(2, 257));
        let ce = g.cross_entropy(l, &[3, 100], Reduction::Mean);
        assert!((g.value(ce).item() - 257f64.ln()).abs() < 1e-12);
        let mut big = vec![0.0; 6];
        big[2] = 1e3;
        let l = g.constant(Tensor::row(big));
        let ce = g.cross_entropy(l, &[2], Reduction::Mean);
        assert!(g.value(ce).item() < 1e-12);
        let l = g.constant(Tensor::zeros(2, 6));
        let ce = g.cross_entropy(l, &[IGNORE_INDEX, 1], Reduction::Sum);
        assert!((g.value(ce).item() - 6f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn backward_through_shared_node() {
        // y = sum((x + x)²) → dy/dx = 8x
        let mut g = Graph::new();
        let x = g.input(Tensor::row(vec![1.0, -2.0]));
        let s = g.add(x, x);
        let q = g.sum_sq_rows(s);
        let l = g.mean_all(q);
        g.backward(l);
        assert_eq!(g.grad(x).unwrap(), &[8.0, -16.0]);
    }
}
