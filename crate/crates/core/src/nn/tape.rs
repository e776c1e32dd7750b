//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] records every primitive executed during a forward pass.
//! [`Tape::backward`] then walks the record in reverse, applying each op's
//! vector-Jacobian product and summing contributions at fan-out points.

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::{gemm, MatMut, MatRef, Scalar};

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Input,
    Param(ParamId),
    MatMul { a: Var, b: Var },
    Linear { x: Var, w: Var, b: Option<Var> },
    Add { a: Var, b: Var },
    AddConst { x: Var },
    LeakyRelu { x: Var, slope: T },
    Softmax { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T> },
    ConcatLast { a: Var, b: Var },
    Reshape { x: Var },
    Mask { x: Var, mask: Vec<T> },
    AvgPool { x: Var },
    Gather { x: Var, index: Vec<usize> },
    Bce { p: Var, targets: Vec<T> },
    WeightedSum { x: Var, weights: Option<Vec<T>> },
}

struct Node<T> {
    /// `None` for parameter leaves, whose value lives in the store.
    value: Option<Tensor<T>>,
    op: Op<T>,
}

/// Lower/upper clamp applied to probabilities before the log in BCE.
pub const BCE_CLAMP: f64 = 1e-12;

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    nodes: Vec<Option<Tensor<T>>>,
    params: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to a leaf (input or parameter
    /// var). Intermediate gradients are released during the pass.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(id.0).and_then(Option::as_ref)
    }

    /// Adds the parameter gradients into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for (p, g) in store.params_mut().iter_mut().zip(&self.params) {
            if let Some(g) = g {
                p.grad.add_assign(g);
            }
        }
    }
}

pub struct Tape<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
}

fn pool_window(i: usize, len: usize, out: usize) -> (usize, usize) {
    (i * len / out, (i + 1) * len / out)
}

fn shape_err<R>(msg: String) -> Result<R> {
    Err(Error::Shape(msg))
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self { params, nodes: Vec::new(), param_vars: vec![None; params.len()] }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.value(*id),
            (None, _) => unreachable!("non-parameter node without a value"),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value: Some(value), op });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input)
    }

    /// Leaf for a stored parameter; repeated calls return the same var.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node { value: None, op: Op::Param(id) });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Plain 2-D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.shape()[1] != bv.shape()[0] {
            return shape_err(format!("matmul {:?} x {:?}", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(T::one(), MatRef::row_major(av.data(), 0, m, k), MatRef::row_major(bv.data(), 0, k, n), T::zero(), MatMut::row_major(&mut out, 0, m, n));
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul { a, b }))
    }

    /// Affine map over the last axis: `x W + b`, broadcast over leading axes.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.shape().len() != 2 || xv.shape().is_empty() || xv.last_dim() != wv.shape()[0] {
            return shape_err(format!("linear input {:?} with weight {:?}", xv.shape(), wv.shape()));
        }
        let (rows, din, dout) = (xv.leading(), wv.shape()[0], wv.shape()[1]);
        let mut out = vec![T::zero(); rows * dout];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != dout {
                return shape_err(format!("linear bias {:?} for output width {dout}", bv.shape()));
            }
            for r in 0..rows {
                out[r * dout..(r + 1) * dout].copy_from_slice(bv.data());
            }
        }
        gemm(T::one(), MatRef::row_major(xv.data(), 0, rows, din), MatRef::row_major(wv.data(), 0, din, dout), T::one(), MatMut::row_major(&mut out, 0, rows, dout));
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Linear { x, w, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return shape_err(format!("add {:?} + {:?}", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Add { a, b }))
    }

    /// Adds a constant whose shape matches the trailing axes of `x`.
    pub fn add_const(&mut self, x: Var, c: &Tensor<T>) -> Result<Var> {
        let xv = self.value(x);
        let (xs, cs) = (xv.shape(), c.shape());
        if cs.len() > xs.len() || xs[xs.len() - cs.len()..] != *cs {
            return shape_err(format!("cannot broadcast {cs:?} onto {xs:?}"));
        }
        let n = c.len();
        let data = xv.data().iter().enumerate().map(|(i, &v)| v + c.data()[i % n]).collect();
        let t = Tensor::new(xs.to_vec(), data)?;
        Ok(self.push(t, Op::AddConst { x }))
    }

    /// `max(slope * x, x)`; the derivative at exactly zero is `slope`.
    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let t = self.value(x).map(|v| if v > T::zero() { v } else { slope * v });
        self.push(t, Op::LeakyRelu { x, slope })
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(xv.last_dim()) {
            softmax_row(row);
        }
        let t = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Softmax { x })
    }

    /// Normalizes each position over the last axis (population variance),
    /// then applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let d = xv.last_dim();
        if gv.len() != d || bv.len() != d {
            return shape_err(format!("layer norm over width {d} with gamma {:?}, beta {:?}", gv.shape(), bv.shape()));
        }
        let rows = xv.leading();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        let dn = T::of(d as f64);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = gv.data()[j] * h + bv.data()[j];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, xhat, inv_std }))
    }

    /// Scaled dot-product self-attention core for `heads` heads.
    ///
    /// `q`, `k`, `v` are `[L, d]` or `[B, L, d]` with `d` divisible by
    /// `heads`. Head `h` reads and writes columns `h*d/heads..(h+1)*d/heads`;
    /// the output holds the concatenated head outputs.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() || !(2..=3).contains(&qv.shape().len()) {
            return shape_err(format!("attention q {:?} k {:?} v {:?}", qv.shape(), kv.shape(), vv.shape()));
        }
        let d = qv.last_dim();
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide width {d}")));
        }
        let l = qv.shape()[qv.shape().len() - 2];
        let batch = qv.len() / (l * d);
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut probs = vec![T::zero(); batch * heads * l * l];
        let mut out = vec![T::zero(); qv.len()];
        for b in 0..batch {
            let base = b * l * d;
            for h in 0..heads {
                let pbase = (b * heads + h) * l * l;
                let qm = MatRef::row_major(qv.data(), base, l, d).cols(h * dh, dh);
                let km = MatRef::row_major(kv.data(), base, l, d).cols(h * dh, dh);
                let vm = MatRef::row_major(vv.data(), base, l, d).cols(h * dh, dh);
                gemm(scale, qm, km.t(), T::zero(), MatMut::row_major(&mut probs, pbase, l, l));
                for row in probs[pbase..pbase + l * l].chunks_mut(l) {
                    softmax_row(row);
                }
                let pm = MatRef::row_major(&probs, pbase, l, l);
                gemm(T::one(), pm, vm, T::zero(), MatMut::row_major(&mut out, base, l, d).cols(h * dh, dh));
            }
        }
        let t = Tensor::new(qv.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Attention { q, k, v, heads, probs }))
    }

    /// Concatenates along the last axis.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return shape_err(format!("concat {sa:?} with {sb:?}"));
        }
        let (da, db) = (av.last_dim(), bv.last_dim());
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for r in 0..av.leading() {
            data.extend_from_slice(av.row(r));
            data.extend_from_slice(bv.row(r));
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = da + db;
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::ConcatLast { a, b }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape { x }))
    }

    /// Elementwise product with a constant mask (used by dropout).
    pub fn mask(&mut self, x: Var, mask: Vec<T>) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.len() {
            return shape_err(format!("mask of {} values for {:?}", mask.len(), xv.shape()));
        }
        let data = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Mask { x, mask }))
    }

    /// Window-averages the second-to-last axis down to `out_len` positions.
    /// Window `i` covers `[floor(i L / out), floor((i+1) L / out))`.
    pub fn avg_pool(&mut self, x: Var, out_len: usize) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() < 2 {
            return shape_err(format!("pooling needs a sequence axis, got {s:?}"));
        }
        let (l, d) = (s[s.len() - 2], s[s.len() - 1]);
        if out_len == 0 || l < out_len {
            return shape_err(format!("cannot pool length {l} to {out_len}"));
        }
        let outer = xv.len() / (l * d);
        let mut out = vec![T::zero(); outer * out_len * d];
        for o in 0..outer {
            for i in 0..out_len {
                let (start, end) = pool_window(i, l, out_len);
                let inv = T::one() / T::of((end - start) as f64);
                let dst = &mut out[(o * out_len + i) * d..(o * out_len + i + 1) * d];
                for j in start..end {
                    let src = &xv.data()[(o * l + j) * d..(o * l + j + 1) * d];
                    for (a, &b) in dst.iter_mut().zip(src) {
                        *a = *a + b;
                    }
                }
                dst.iter_mut().for_each(|a| *a = *a * inv);
            }
        }
        let mut shape = s.to_vec();
        let n = shape.len();
        shape[n - 2] = out_len;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::AvgPool { x }))
    }

    /// Selects slices along the first axis.
    pub fn gather(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.is_empty() {
            return shape_err("gather on a scalar".into());
        }
        let stride = xv.len() / s[0].max(1);
        let mut data = Vec::with_capacity(index.len() * stride);
        for &i in &index {
            if i >= s[0] {
                return shape_err(format!("gather index {i} out of range for {s:?}"));
            }
            data.extend_from_slice(&xv.data()[i * stride..(i + 1) * stride]);
        }
        let mut shape = s.to_vec();
        shape[0] = index.len();
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Gather { x, index }))
    }

    /// Mean binary cross-entropy on column 1 of a `[N, 2]` probability
    /// tensor. Probabilities are clamped to `[1e-12, 1 - 1e-12]`.
    pub fn bce(&mut self, p: Var, targets: &[T]) -> Result<Var> {
        let pv = self.value(p);
        if pv.shape().len() != 2 || pv.shape()[1] != 2 || pv.shape()[0] != targets.len() {
            return shape_err(format!("bce on {:?} with {} targets", pv.shape(), targets.len()));
        }
        if targets.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let loss = bce_value(targets, (0..targets.len()).map(|i| pv.data()[2 * i + 1]));
        Ok(self.push(Tensor::scalar(loss), Op::Bce { p, targets: targets.to_vec() }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::WeightedSum { x, weights: None })
    }

    /// `sum_i w_i x_i` over all elements.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<T>) -> Result<Var> {
        let xv = self.value(x);
        if weights.len() != xv.len() {
            return shape_err(format!("{} weights for {:?}", weights.len(), xv.shape()));
        }
        let s = xv.data().iter().zip(&weights).map(|(&a, &w)| a * w).sum();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights: Some(weights) }))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::State("backward called before any forward op was recorded".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::State(format!("loss must be a scalar, got shape {:?}", self.value(loss).shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        let mut param_grads: Vec<Option<Tensor<T>>> = vec![None; self.params.len()];

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Input => grads[i] = Some(g),
                Op::Param(id) => {
                    accumulate(&mut param_grads[id.0], g.clone());
                    grads[i] = Some(g);
                }
                Op::MatMul { a, b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    let mut da = vec![T::zero(); m * k];
                    gemm(T::one(), MatRef::row_major(g.data(), 0, m, n), MatRef::row_major(bv.data(), 0, k, n).t(), T::zero(), MatMut::row_major(&mut da, 0, m, k));
                    let mut db = vec![T::zero(); k * n];
                    gemm(T::one(), MatRef::row_major(av.data(), 0, m, k).t(), MatRef::row_major(g.data(), 0, m, n), T::zero(), MatMut::row_major(&mut db, 0, k, n));
                    send(&mut grads, *a, Tensor::new(vec![m, k], da)?);
                    send(&mut grads, *b, Tensor::new(vec![k, n], db)?);
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (rows, din, dout) = (xv.leading(), wv.shape()[0], wv.shape()[1]);
                    if !self.is_constant(*x) {
                        let mut dx = vec![T::zero(); rows * din];
                        gemm(T::one(), MatRef::row_major(g.data(), 0, rows, dout), MatRef::row_major(wv.data(), 0, din, dout).t(), T::zero(), MatMut::row_major(&mut dx, 0, rows, din));
                        send(&mut grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                    }
                    let mut dw = vec![T::zero(); din * dout];
                    gemm(T::one(), MatRef::row_major(xv.data(), 0, rows, din).t(), MatRef::row_major(g.data(), 0, rows, dout), T::zero(), MatMut::row_major(&mut dw, 0, din, dout));
                    send(&mut grads, *w, Tensor::new(vec![din, dout], dw)?);
                    if let Some(b) = b {
                        let mut db = vec![T::zero(); dout];
                        for r in 0..rows {
                            for (acc, &v) in db.iter_mut().zip(g.row(r)) {
                                *acc = *acc + v;
                            }
                        }
                        let shape = self.value(*b).shape().to_vec();
                        send(&mut grads, *b, Tensor::new(shape, db)?);
                    }
                }
                Op::Add { a, b } => {
                    send(&mut grads, *a, g.clone());
                    send(&mut grads, *b, g);
                }
                Op::AddConst { x } => send(&mut grads, *x, g),
                Op::LeakyRelu { x, slope } => {
                    let xv = self.value(*x);
                    let data = xv.data().iter().zip(g.data()).map(|(&v, &gv)| if v > T::zero() { gv } else { *slope * gv }).collect();
                    send(&mut grads, *x, Tensor::new(xv.shape().to_vec(), data)?);
                }
                Op::Softmax { x } => {
                    let y = self.value(Var(i));
                    let d = y.last_dim();
                    let mut dx = vec![T::zero(); y.len()];
                    for r in 0..y.leading() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..d {
                            dx[r * d + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    send(&mut grads, *x, Tensor::new(y.shape().to_vec(), dx)?);
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let gv = self.value(*gamma);
                    let d = gv.len();
                    let rows = inv_std.len();
                    let dn = T::of(d as f64);
                    let mut dx = vec![T::zero(); rows * d];
                    let mut dgamma = vec![T::zero(); d];
                    let mut dbeta = vec![T::zero(); d];
                    let mut dxhat = vec![T::zero(); d];
                    for r in 0..rows {
                        let gr = g.row(r);
                        let hr = &xhat[r * d..(r + 1) * d];
                        let (mut s1, mut s2) = (T::zero(), T::zero());
                        for j in 0..d {
                            dgamma[j] = dgamma[j] + gr[j] * hr[j];
                            dbeta[j] = dbeta[j] + gr[j];
                            dxhat[j] = gr[j] * gv.data()[j];
                            s1 = s1 + dxhat[j];
                            s2 = s2 + dxhat[j] * hr[j];
                        }
                        let c = inv_std[r] / dn;
                        for j in 0..d {
                            dx[r * d + j] = c * (dn * dxhat[j] - s1 - hr[j] * s2);
                        }
                    }
                    let xs = self.value(*x).shape().to_vec();
                    send(&mut grads, *x, Tensor::new(xs, dx)?);
                    send(&mut grads, *gamma, Tensor::new(gv.shape().to_vec(), dgamma)?);
                    let bs = self.value(*beta).shape().to_vec();
                    send(&mut grads, *beta, Tensor::new(bs, dbeta)?);
                }
                Op::Attention { q, k, v, heads, probs } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let d = qv.last_dim();
                    let l = qv.shape()[qv.shape().len() - 2];
                    let batch = qv.len() / (l * d);
                    let dh = d / heads;
                    let scale = T::one() / T::of(dh as f64).sqrt();
                    let mut dq = vec![T::zero(); qv.len()];
                    let mut dk = vec![T::zero(); qv.len()];
                    let mut dv = vec![T::zero(); qv.len()];
                    let mut ds = vec![T::zero(); l * l];
                    for b in 0..batch {
                        let base = b * l * d;
                        for h in 0..*heads {
                            let pbase = (b * heads + h) * l * l;
                            let pm = MatRef::row_major(probs, pbase, l, l);
                            let gm = MatRef::row_major(g.data(), base, l, d).cols(h * dh, dh);
                            let qm = MatRef::row_major(qv.data(), base, l, d).cols(h * dh, dh);
                            let km = MatRef::row_major(kv.data(), base, l, d).cols(h * dh, dh);
                            let vm = MatRef::row_major(vv.data(), base, l, d).cols(h * dh, dh);
                            gemm(T::one(), pm.t(), gm, T::zero(), MatMut::row_major(&mut dv, base, l, d).cols(h * dh, dh));
                            // ds <- dP = G V^T, then the softmax VJP row by row
                            gemm(T::one(), gm, vm.t(), T::zero(), MatMut::row_major(&mut ds, 0, l, l));
                            for r in 0..l {
                                let pr = &probs[pbase + r * l..pbase + (r + 1) * l];
                                let dr = &mut ds[r * l..(r + 1) * l];
                                let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                                for (x, &p) in dr.iter_mut().zip(pr) {
                                    *x = p * (*x - dot);
                                }
                            }
                            let dsm = MatRef::row_major(&ds, 0, l, l);
                            gemm(scale, dsm, km, T::zero(), MatMut::row_major(&mut dq, base, l, d).cols(h * dh, dh));
                            gemm(scale, dsm.t(), qm, T::zero(), MatMut::row_major(&mut dk, base, l, d).cols(h * dh, dh));
                        }
                    }
                    let shape = qv.shape().to_vec();
                    send(&mut grads, *q, Tensor::new(shape.clone(), dq)?);
                    send(&mut grads, *k, Tensor::new(shape.clone(), dk)?);
                    send(&mut grads, *v, Tensor::new(shape, dv)?);
                }
                Op::ConcatLast { a, b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (da, db) = (av.last_dim(), bv.last_dim());
                    let mut ga = Vec::with_capacity(av.len());
                    let mut gb = Vec::with_capacity(bv.len());
                    for r in 0..av.leading() {
                        let row = g.row(r);
                        ga.extend_from_slice(&row[..da]);
                        gb.extend_from_slice(&row[da..da + db]);
                    }
                    let (sa, sb) = (av.shape().to_vec(), bv.shape().to_vec());
                    send(&mut grads, *a, Tensor::new(sa, ga)?);
                    send(&mut grads, *b, Tensor::new(sb, gb)?);
                }
                Op::Reshape { x } => {
                    let shape = self.value(*x).shape().to_vec();
                    send(&mut grads, *x, g.reshape(&shape)?);
                }
                Op::Mask { x, mask } => {
                    let data = g.data().iter().zip(mask).map(|(&a, &m)| a * m).collect();
                    send(&mut grads, *x, Tensor::new(g.shape().to_vec(), data)?);
                }
                Op::AvgPool { x } => {
                    let xv = self.value(*x);
                    let s = xv.shape();
                    let (l, d) = (s[s.len() - 2], s[s.len() - 1]);
                    let out_len = g.shape()[g.shape().len() - 2];
                    let outer = xv.len() / (l * d);
                    let mut dx = vec![T::zero(); xv.len()];
                    for o in 0..outer {
                        for i in 0..out_len {
                            let (start, end) = pool_window(i, l, out_len);
                            let inv = T::one() / T::of((end - start) as f64);
                            let src = &g.data()[(o * out_len + i) * d..(o * out_len + i + 1) * d];
                            for j in start..end {
                                let dst = &mut dx[(o * l + j) * d..(o * l + j + 1) * d];
                                for (a, &b) in dst.iter_mut().zip(src) {
                                    *a = *a + b * inv;
                                }
                            }
                        }
                    }
                    send(&mut grads, *x, Tensor::new(s.to_vec(), dx)?);
                }
                Op::Gather { x, index } => {
                    let xv = self.value(*x);
                    let stride = xv.len() / xv.shape()[0].max(1);
                    let mut dx = vec![T::zero(); xv.len()];
                    for (row, &src) in index.iter().enumerate() {
                        let gs = &g.data()[row * stride..(row + 1) * stride];
                        for (a, &b) in dx[src * stride..(src + 1) * stride].iter_mut().zip(gs) {
                            *a = *a + b;
                        }
                    }
                    send(&mut grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
                Op::Bce { p, targets } => {
                    let pv = self.value(*p);
                    let n = T::of(targets.len() as f64);
                    let (lo, hi) = (T::of(BCE_CLAMP), T::one() - T::of(BCE_CLAMP));
                    let seed = g.data()[0];
                    let mut dp = vec![T::zero(); pv.len()];
                    for (i, &y) in targets.iter().enumerate() {
                        let pc = pv.data()[2 * i + 1];
                        if pc > lo && pc < hi {
                            dp[2 * i + 1] = -seed * (y / pc - (T::one() - y) / (T::one() - pc)) / n;
                        }
                    }
                    send(&mut grads, *p, Tensor::new(pv.shape().to_vec(), dp)?);
                }
                Op::WeightedSum { x, weights } => {
                    let xv = self.value(*x);
                    let seed = g.data()[0];
                    let data = match weights {
                        Some(w) => w.iter().map(|&w| w * seed).collect(),
                        None => vec![seed; xv.len()],
                    };
                    send(&mut grads, *x, Tensor::new(xv.shape().to_vec(), data)?);
                }
            }
        }
        Ok(Gradients { nodes: grads, params: param_grads })
    }

    fn is_constant(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Input)
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn send<T: Scalar>(grads: &mut [Option<Tensor<T>>], to: Var, g: Tensor<T>) {
    accumulate(&mut grads[to.0], g);
}

/// Softmax of one row in place, subtracting the row max first.
pub(crate) fn softmax_row<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Mean BCE with the probability clamp applied.
pub fn bce_value<T: Scalar>(targets: &[T], p_liq: impl Iterator<Item = T>) -> T {
    let (lo, hi) = (T::of(BCE_CLAMP), T::one() - T::of(BCE_CLAMP));
    let n = T::of(targets.len() as f64);
    let total: T = targets
        .iter()
        .zip(p_liq)
        .map(|(&y, p)| {
            let p = p.max(lo).min(hi);
            y * p.ln() + (T::one() - y) * (T::one() - p).ln()
        })
        .sum();
    -total / n
}
