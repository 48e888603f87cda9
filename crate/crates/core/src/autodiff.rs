//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends one node holding its output value. Nodes are
//! created in topological order, so `backward` is a single reverse sweep.

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::{strides, Element, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Matmul {
        a: Var,
        b: Var,
        trans_b: bool,
        shared_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    AddSuffix(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        a: Var,
        axis: usize,
        start: usize,
    },
    Repeat(Var),
    SumAll(Var),
    MeanAxis(Var, usize),
    Gelu(Var),
    Softmax(Var, T),
    LogSoftmax(Var, T),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Dropout(Var, Vec<T>),
    CrossEntropy {
        logits: Var,
        probs: Vec<T>,
        target: Vec<T>,
    },
    L2Normalize(Var, Vec<T>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation. Values are kept for every node until `backward`.
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by the leaf `Var`.
#[derive(Debug)]
pub struct Gradients<T: Element = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn gelu_parts<T: Element>(x: T) -> (T, T) {
    let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let a = T::from_f64_lossy(0.044715);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x);
    (y, dy)
}

// Row math runs in f64 so f32 rows lose only the final rounding.
fn softmax_row<T: Element>(row: &[T], inv_t: T, out: &mut [T]) {
    let inv_t = inv_t.to_f64_lossy();
    let max = row.iter().copied().fold(T::neg_infinity(), T::max).to_f64_lossy();
    let exps: Vec<f64> = row.iter().map(|&x| ((x.to_f64_lossy() - max) * inv_t).exp()).collect();
    let total: f64 = exps.iter().sum();
    for (o, e) in out.iter_mut().zip(exps) {
        *o = T::from_f64_lossy(e / total);
    }
}

fn log_softmax_row<T: Element>(row: &[T], inv_t: T, out: &mut [T]) {
    let inv_t = inv_t.to_f64_lossy();
    let max = row.iter().copied().fold(T::neg_infinity(), T::max).to_f64_lossy();
    let lse = row
        .iter()
        .map(|&x| ((x.to_f64_lossy() - max) * inv_t).exp())
        .sum::<f64>()
        .ln();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = T::from_f64_lossy((x.to_f64_lossy() - max) * inv_t - lse);
    }
}

/// Row-wise `softmax(x / temperature)` over the last axis, outside any tape.
pub fn softmax<T: Element>(x: &Tensor<T>, temperature: T) -> Result<Tensor<T>> {
    check_temperature(temperature)?;
    let mut out = Tensor::zeros(x.shape().to_vec());
    let d = x.last_dim();
    for (row, o) in x.rows().zip(out.data_mut().chunks_exact_mut(d)) {
        softmax_row(row, T::one() / temperature, o);
    }
    Ok(out)
}

/// Row-wise `log_softmax(x / temperature)` over the last axis, outside any tape.
pub fn log_softmax<T: Element>(x: &Tensor<T>, temperature: T) -> Result<Tensor<T>> {
    check_temperature(temperature)?;
    let mut out = Tensor::zeros(x.shape().to_vec());
    let d = x.last_dim();
    for (row, o) in x.rows().zip(out.data_mut().chunks_exact_mut(d)) {
        log_softmax_row(row, T::one() / temperature, o);
    }
    Ok(out)
}

fn check_temperature<T: Element>(t: T) -> Result<()> {
    if t > T::zero() && t.is_finite() {
        Ok(())
    } else {
        Err(Error::param(format!(
            "temperature must be positive, got {}",
            t.to_f64_lossy()
        )))
    }
}

/// Validates that each row of a target distribution sums to one.
pub fn check_distribution<T: Element>(target: &Tensor<T>, tol: f64) -> Result<()> {
    for (i, row) in target.rows().enumerate() {
        let s: f64 = row.iter().map(|v| v.to_f64_lossy()).sum();
        if (s - 1.0).abs() > tol || row.iter().any(|v| *v < T::zero()) {
            return Err(Error::validation(format!(
                "target row {i} is not a distribution (sum {s})"
            )));
        }
    }
    Ok(())
}

fn permute_data<T: Element>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let rank = shape.len();
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let mut idx = vec![0usize; rank - 1];
    let outer: usize = out_shape[..rank - 1].iter().product();
    for _ in 0..outer {
        let base: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        if inner_stride == 1 {
            out.extend_from_slice(&data[base..base + inner]);
        } else {
            out.extend((0..inner).map(|j| data[base + j * inner_stride]));
        }
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

fn accumulate<T: Element>(grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contrib) {
                *e = *e + c;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf node. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Matrix product over the last two axes.
    ///
    /// `a` is `[..., m, k]`; `b` is either `[k, n]` (shared by every leading
    /// index of `a`) or `[..., k, n]` with the same leading dims as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` over the last two axes; `b` is `[..., n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        let shared_b = lead_b.is_empty();
        if kb != k || (!shared_b && lead_a != lead_b) {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let batch: usize = lead_a.iter().product();
        let mut out_shape = lead_a.to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![T::zero(); batch * m * n];
        let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            if shared_b && !trans_b {
                T::gemm(batch * m, k, n, T::one(), av, k as isize, 1, bv, rsb, csb, T::zero(), &mut out);
            } else {
                for i in 0..batch {
                    let a_i = &av[i * m * k..(i + 1) * m * k];
                    let b_i = if shared_b { bv } else { &bv[i * k * n..(i + 1) * k * n] };
                    T::gemm(m, k, n, T::one(), a_i, k as isize, 1, b_i, rsb, csb, T::zero(), &mut out[i * m * n..(i + 1) * m * n]);
                }
            }
        }
        let value = Tensor::new(out_shape, out)?;
        self.push(
            "matmul",
            value,
            Op::Matmul {
                a,
                b,
                trans_b,
                shared_b,
                batch,
                m,
                k,
                n,
            },
            &[a, b],
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape("add", sa, sb));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(sa.to_vec(), data)?;
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    /// `a + b` where `b`'s shape equals a trailing suffix of `a`'s shape
    /// (bias vectors, position tables).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape("add_broadcast", sa, sb));
        }
        let bv = self.value(b).data();
        let chunk = bv.len();
        let mut data = self.value(a).data().to_vec();
        for c in data.chunks_exact_mut(chunk) {
            for (x, &y) in c.iter_mut().zip(bv) {
                *x = *x + y;
            }
        }
        let value = Tensor::new(sa.to_vec(), data)?;
        self.push("add_broadcast", value, Op::AddSuffix(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -T::one())?;
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape("mul", sa, sb));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(sa.to_vec(), data)?;
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let value = self.value(a).map(|x| x * s);
        self.push("scale", value, Op::Scale(a, s), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        self.push("reshape", value, Op::Reshape(a), &[a])
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", &shape, perm));
        }
        let (data, out_shape) = permute_data(self.value(a).data(), &shape, perm);
        let value = Tensor::new(out_shape, data)?;
        self.push("permute", value, Op::Permute(a, perm.to_vec()), &[a])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::shape("transpose", self.shape(a), &[]));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::param("concat of nothing"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        self.push(
            "concat",
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        )
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape("slice", &shape, &[axis, start, len]));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, data)?;
        self.push("slice", value, Op::Slice { a, axis, start }, &[a])
    }

    /// Tiles a tensor with leading dim 1 to leading dim `n`.
    pub fn repeat_leading(&mut self, a: Var, n: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape[0] != 1 || n == 0 {
            return Err(Error::shape("repeat_leading", &shape, &[n]));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(src.len() * n);
        for _ in 0..n {
            data.extend_from_slice(src);
        }
        let mut out_shape = shape;
        out_shape[0] = n;
        let value = Tensor::new(out_shape, data)?;
        self.push("repeat_leading", value, Op::Repeat(a), &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let total: f64 = self.value(a).data().iter().map(|v| v.to_f64_lossy()).sum();
        let value = Tensor::scalar(T::from_f64_lossy(total));
        self.push("sum", value, Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = T::from_usize(self.value(a).numel()).expect("count fits");
        let s = self.sum_all(a)?;
        self.scale(s, T::one() / n)
    }

    /// Mean over one axis; the axis is removed (rank-1 inputs give shape `[1]`).
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("mean_axis", &shape, &[axis]));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let d = shape[axis];
        let src = self.value(a).data();
        let mut acc = vec![0f64; outer * inner];
        for o in 0..outer {
            for j in 0..d {
                let row = &src[(o * d + j) * inner..(o * d + j + 1) * inner];
                for (s, &x) in acc[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *s += x.to_f64_lossy();
                }
            }
        }
        let data: Vec<T> = acc.iter().map(|&s| T::from_f64_lossy(s / d as f64)).collect();
        let mut out_shape: Vec<usize> = shape[..axis].iter().chain(&shape[axis + 1..]).copied().collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let value = Tensor::new(out_shape, data)?;
        self.push("mean_axis", value, Op::MeanAxis(a, axis), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| gelu_parts(x).0);
        self.push("gelu", value, Op::Gelu(a), &[a])
    }

    /// `softmax(a / temperature)` over the last axis.
    pub fn softmax(&mut self, a: Var, temperature: T) -> Result<Var> {
        let value = softmax(self.value(a), temperature)?;
        self.push("softmax", value, Op::Softmax(a, T::one() / temperature), &[a])
    }

    /// `log_softmax(a / temperature)` over the last axis.
    pub fn log_softmax(&mut self, a: Var, temperature: T) -> Result<Var> {
        let value = log_softmax(self.value(a), temperature)?;
        self.push("log_softmax", value, Op::LogSoftmax(a, T::one() / temperature), &[a])
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gain` and `bias` (both shaped like the last axis).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::param("layer_norm eps must be positive"));
        }
        let d = self.value(x).last_dim();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let inv_d = 1.0 / d as f64;
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = self.value(x).numel() / d;
        let mut xhat = Vec::with_capacity(rows * d);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * d);
        for row in self.value(x).rows() {
            let mean = row.iter().map(|v| v.to_f64_lossy()).sum::<f64>() * inv_d;
            let var = row.iter().map(|v| (v.to_f64_lossy() - mean).powi(2)).sum::<f64>() * inv_d;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(T::from_f64_lossy(r));
            for (j, &v) in row.iter().enumerate() {
                let h = T::from_f64_lossy((v.to_f64_lossy() - mean) * r);
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    /// Inverted dropout. Identity when `p == 0` or `training` is false.
    pub fn dropout(&mut self, a: Var, p: f64, training: bool, rng: &mut RngState) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::param(format!("dropout probability {p} outside [0, 1)")));
        }
        if p == 0.0 || !training {
            return Ok(a);
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(a).numel())
            .map(|_| if rng.uniform() < p { T::zero() } else { keep })
            .collect();
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| x * m)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("dropout", value, Op::Dropout(a, mask), &[a])
    }

    /// Mean over rows of `-Σ target · log_softmax(logits)`. Targets may be soft
    /// but every row must sum to 1.
    pub fn cross_entropy(&mut self, logits: Var, target: &Tensor<T>) -> Result<Var> {
        let shape = self.shape(logits);
        if shape != target.shape() || shape.len() != 2 {
            return Err(Error::shape("cross_entropy", shape, target.shape()));
        }
        check_distribution(target, 1e-5)?;
        let k = shape[1];
        let b = shape[0];
        let logp = log_softmax(self.value(logits), T::one())?;
        let mut total = 0.0f64;
        for (lp, y) in logp.rows().zip(target.rows()) {
            for (&l, &t) in lp.iter().zip(y) {
                if t != T::zero() {
                    total -= t.to_f64_lossy() * l.to_f64_lossy();
                }
            }
        }
        let loss = T::from_f64_lossy(total / b as f64);
        let probs: Vec<T> = logp.data().iter().map(|l| l.exp()).collect();
        debug_assert_eq!(probs.len(), b * k);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                probs,
                target: target.data().to_vec(),
            },
            &[logits],
        )
    }

    /// Scales each row of the last axis to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let eps = T::from_f64_lossy(1e-12);
        let d = self.value(a).last_dim();
        let mut norms = Vec::new();
        let mut data = Vec::with_capacity(self.value(a).numel());
        for row in self.value(a).rows() {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
            norms.push(n);
            data.extend(row.iter().map(|&v| v / n));
        }
        debug_assert_eq!(data.len() % d, 0);
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("l2_normalize", value, Op::L2Normalize(a, norms), &[a])
    }

    /// Propagates d(loss)/d(node) back to every leaf with `requires_grad`.
    /// Consumes the recorded operations.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        let out = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (&node.op, g) {
                (Op::Leaf, Some(g)) if node.requires_grad => {
                    Some(Tensor::new(node.value.shape().to_vec(), g).expect("gradient shape matches value"))
                }
                _ => None,
            })
            .collect();
        self.nodes.clear();
        Ok(Gradients { grads: out })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            &Op::Matmul {
                a,
                b,
                trans_b,
                shared_b,
                batch,
                m,
                k,
                n,
            } => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                if self.wants(a) {
                    let mut da = vec![T::zero(); batch * m * k];
                    // dA = G · op(B)ᵀ
                    let (rs, cs) = if trans_b { (k as isize, 1) } else { (1, n as isize) };
                    if shared_b {
                        T::gemm(batch * m, n, k, T::one(), g, n as isize, 1, bv, rs, cs, T::zero(), &mut da);
                    } else {
                        for j in 0..batch {
                            T::gemm(m, n, k, T::one(), &g[j * m * n..(j + 1) * m * n], n as isize, 1, &bv[j * k * n..(j + 1) * k * n], rs, cs, T::zero(), &mut da[j * m * k..(j + 1) * m * k]);
                        }
                    }
                    accumulate(grads, a, da);
                }
                if self.wants(b) {
                    let per = k * n;
                    let mut db = vec![T::zero(); if shared_b { per } else { batch * per }];
                    if shared_b && !trans_b {
                        T::gemm(k, batch * m, n, T::one(), av, 1, k as isize, g, n as isize, 1, T::zero(), &mut db);
                    } else {
                        for j in 0..batch {
                            let a_j = &av[j * m * k..(j + 1) * m * k];
                            let g_j = &g[j * m * n..(j + 1) * m * n];
                            let (dst, beta) = if shared_b {
                                (&mut db[..], if j == 0 { T::zero() } else { T::one() })
                            } else {
                                (&mut db[j * per..(j + 1) * per], T::zero())
                            };
                            if trans_b {
                                // d(B stored n×k) = Gᵀ · A
                                T::gemm(n, m, k, T::one(), g_j, 1, n as isize, a_j, k as isize, 1, beta, dst);
                            } else {
                                T::gemm(k, m, n, T::one(), a_j, 1, k as isize, g_j, n as isize, 1, beta, dst);
                            }
                        }
                    }
                    accumulate(grads, b, db);
                }
            }
            &Op::Add(a, b) => {
                if self.wants(a) {
                    accumulate(grads, a, g.to_vec());
                }
                if self.wants(b) {
                    accumulate(grads, b, g.to_vec());
                }
            }
            &Op::AddSuffix(a, b) => {
                if self.wants(a) {
                    accumulate(grads, a, g.to_vec());
                }
                if self.wants(b) {
                    let chunk = self.value(b).numel();
                    let mut db = vec![T::zero(); chunk];
                    for c in g.chunks_exact(chunk) {
                        for (d, &x) in db.iter_mut().zip(c) {
                            *d = *d + x;
                        }
                    }
                    accumulate(grads, b, db);
                }
            }
            &Op::Mul(a, b) => {
                if self.wants(a) {
                    let bv = self.value(b).data();
                    accumulate(grads, a, g.iter().zip(bv).map(|(&x, &y)| x * y).collect());
                }
                if self.wants(b) {
                    let av = self.value(a).data();
                    accumulate(grads, b, g.iter().zip(av).map(|(&x, &y)| x * y).collect());
                }
            }
            &Op::Scale(a, s) => accumulate(grads, a, g.iter().map(|&x| x * s).collect()),
            &Op::Reshape(a) => accumulate(grads, a, g.to_vec()),
            Op::Permute(a, perm) => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let (da, _) = permute_data(g, node.value.shape(), &inverse);
                accumulate(grads, *a, da);
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis] * inner;
                    if self.wants(p) {
                        let mut dp = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            dp.extend_from_slice(&g[o * total + offset..o * total + offset + len]);
                        }
                        accumulate(grads, p, dp);
                    }
                    offset += len;
                }
            }
            &Op::Slice { a, axis, start } => {
                let src = self.shape(a);
                let outer: usize = src[..axis].iter().product();
                let inner: usize = src[axis + 1..].iter().product();
                let len = node.value.shape()[axis];
                let mut da = vec![T::zero(); self.value(a).numel()];
                for o in 0..outer {
                    let dst = (o * src[axis] + start) * inner;
                    da[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                accumulate(grads, a, da);
            }
            &Op::Repeat(a) => {
                let chunk = self.value(a).numel();
                let mut da = vec![T::zero(); chunk];
                for c in g.chunks_exact(chunk) {
                    for (d, &x) in da.iter_mut().zip(c) {
                        *d = *d + x;
                    }
                }
                accumulate(grads, a, da);
            }
            &Op::SumAll(a) => accumulate(grads, a, vec![g[0]; self.value(a).numel()]),
            &Op::MeanAxis(a, axis) => {
                let shape = self.shape(a);
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let d = shape[axis];
                let inv = T::one() / T::from_usize(d).expect("count fits");
                let mut da = Vec::with_capacity(self.value(a).numel());
                for o in 0..outer {
                    for _ in 0..d {
                        da.extend(g[o * inner..(o + 1) * inner].iter().map(|&x| x * inv));
                    }
                }
                accumulate(grads, a, da);
            }
            &Op::Gelu(a) => {
                let av = self.value(a).data();
                accumulate(grads, a, g.iter().zip(av).map(|(&gi, &x)| gi * gelu_parts(x).1).collect());
            }
            &Op::Softmax(a, inv_t) => {
                let y = node.value.data();
                let d = node.value.last_dim();
                let mut da = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks_exact(d).zip(g.chunks_exact(d)) {
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    da.extend(yr.iter().zip(gr).map(|(&p, &q)| p * (q - dot) * inv_t));
                }
                accumulate(grads, a, da);
            }
            &Op::LogSoftmax(a, inv_t) => {
                let y = node.value.data();
                let d = node.value.last_dim();
                let mut da = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks_exact(d).zip(g.chunks_exact(d)) {
                    let total: T = gr.iter().copied().sum();
                    da.extend(yr.iter().zip(gr).map(|(&l, &q)| (q - l.exp() * total) * inv_t));
                }
                accumulate(grads, a, da);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = node.value.last_dim();
                let gv = self.value(*gain).data();
                if self.wants(*gain) || self.wants(*bias) {
                    let mut dg = vec![T::zero(); d];
                    let mut db = vec![T::zero(); d];
                    for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            dg[j] = dg[j] + gr[j] * hr[j];
                            db[j] = db[j] + gr[j];
                        }
                    }
                    if self.wants(*gain) {
                        accumulate(grads, *gain, dg);
                    }
                    if self.wants(*bias) {
                        accumulate(grads, *bias, db);
                    }
                }
                if self.wants(*x) {
                    let inv_d = T::one() / T::from_usize(d).expect("count fits");
                    let mut dx = Vec::with_capacity(g.len());
                    for ((gr, hr), &r) in g.chunks_exact(d).zip(xhat.chunks_exact(d)).zip(rstd) {
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            mean_dh = mean_dh + dh;
                            mean_dh_h = mean_dh_h + dh * hr[j];
                        }
                        mean_dh = mean_dh * inv_d;
                        mean_dh_h = mean_dh_h * inv_d;
                        dx.extend((0..d).map(|j| r * (gr[j] * gv[j] - mean_dh - hr[j] * mean_dh_h)));
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Dropout(a, mask) => {
                accumulate(grads, *a, g.iter().zip(mask).map(|(&x, &m)| x * m).collect());
            }
            Op::CrossEntropy {
                logits,
                probs,
                target,
            } => {
                let shape = self.shape(*logits);
                let (b, k) = (shape[0], shape[1]);
                let scale = g[0] / T::from_usize(b).expect("count fits");
                let mut dl = Vec::with_capacity(b * k);
                for (p, y) in probs.chunks_exact(k).zip(target.chunks_exact(k)) {
                    let mass: T = y.iter().copied().sum();
                    dl.extend(p.iter().zip(y).map(|(&pi, &yi)| (pi * mass - yi) * scale));
                }
                accumulate(grads, *logits, dl);
            }
            Op::L2Normalize(a, norms) => {
                let y = node.value.data();
                let d = node.value.last_dim();
                let mut da = Vec::with_capacity(y.len());
                for ((yr, gr), &n) in y.chunks_exact(d).zip(g.chunks_exact(d)).zip(norms) {
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    da.extend(yr.iter().zip(gr).map(|(&p, &q)| (q - p * dot) / n));
                }
                accumulate(grads, *a, da);
            }
        }
    }
}
