//! Layers with explicit forward caches and hand-written backward passes.
//!
//! Gradients are stored in a value of the same type as the parameters, so
//! every parameter container doubles as its own gradient accumulator.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::tensor::{lit, softmax_rows, softmax_rows_backward, Matrix, Real};

/// A named collection of parameter tensors with a fixed visiting order.
pub trait Params<T: Real> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix<T>)>);
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Matrix<T>)>);

    fn named_tensors(&self) -> Vec<(String, &Matrix<T>)> {
        let mut out = Vec::new();
        self.collect("", &mut out);
        out
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Matrix<T>)> {
        let mut out = Vec::new();
        self.collect_mut("", &mut out);
        out
    }

    fn num_parameters(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// A copy with every tensor set to zero.
    fn zeros_like(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut z = self.clone();
        for (_, t) in z.named_tensors_mut() {
            t.fill(T::zero());
        }
        z
    }

    fn accumulate(&mut self, other: &Self)
    where
        Self: Sized,
    {
        let src = other.named_tensors();
        for ((_, dst), (_, s)) in self.named_tensors_mut().into_iter().zip(src) {
            dst.add_assign(s);
        }
    }

    fn scale_all(&mut self, s: T) {
        for (_, t) in self.named_tensors_mut() {
            t.scale(s);
        }
    }

    fn all_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<T: Real, P: Params<T>> Params<T> for Option<P> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix<T>)>) {
        if let Some(p) = self {
            p.collect(prefix, out);
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Matrix<T>)>) {
        if let Some(p) = self {
            p.collect_mut(prefix, out);
        }
    }
}

impl<T: Real, P: Params<T>> Params<T> for Vec<P> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix<T>)>) {
        for (i, p) in self.iter().enumerate() {
            p.collect(&join(prefix, &i.to_string()), out);
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Matrix<T>)>) {
        for (i, p) in self.iter_mut().enumerate() {
            p.collect_mut(&join(prefix, &i.to_string()), out);
        }
    }
}

/// Glorot-uniform matrix: variance `2 / (fan_in + fan_out)`.
pub fn glorot<T: Real, R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Matrix<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
    Matrix::from_fn(fan_in, fan_out, |_, _| lit(dist.sample(rng)))
}

pub fn normal<T: Real, R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Matrix<T> {
    let dist = Normal::new(0.0, std).expect("valid std");
    Matrix::from_fn(rows, cols, |_, _| lit(dist.sample(rng)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    /// `in × out`
    pub weight: Matrix<T>,
    /// `1 × out`
    pub bias: Matrix<T>,
}

impl<T: Real> Linear<T> {
    pub fn new<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Self {
            weight: glorot(fan_in, fan_out, rng),
            bias: Matrix::zeros(1, fan_out),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            weight: Matrix::identity(dim),
            bias: Matrix::zeros(1, dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Matrix<T>) -> Matrix<T> {
        let mut y = x.matmul(&self.weight);
        y.add_row_broadcast(&self.bias);
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &Matrix<T>, dy: &Matrix<T>, grad: &mut Self) -> Matrix<T> {
        grad.weight.add_assign(&x.t_matmul(dy));
        grad.bias.add_assign(&dy.sum_rows());
        dy.matmul_t(&self.weight)
    }
}

impl<T: Real> Params<T> for Linear<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix<T>)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Matrix<T>)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<T> {
    pub scale: Matrix<T>,
    pub offset: Matrix<T>,
}

pub struct LayerNormCache<T> {
    normalized: Matrix<T>,
    inv_std: Vec<T>,
}

impl<T: Real> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            scale: Matrix::filled(1, dim, T::one()),
            offset: Matrix::zeros(1, dim),
        }
    }

    pub fn forward(&self, x: &Matrix<T>) -> (Matrix<T>, LayerNormCache<T>) {
        let d = x.cols();
        let n = lit::<T>(d as f64);
        let eps = lit::<T>(LAYER_NORM_EPS);
        let mut normalized = Matrix::zeros(x.rows(), d);
        let mut inv_std = Vec::with_capacity(x.rows());
        let mut y = Matrix::zeros(x.rows(), d);
        for r in 0..x.rows() {
            let row = x.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for c in 0..d {
                let xh = (row[c] - mean) * is;
                normalized.set(r, c, xh);
                y.set(r, c, xh * self.scale.get(0, c) + self.offset.get(0, c));
            }
        }
        (y, LayerNormCache { normalized, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache<T>, dy: &Matrix<T>, grad: &mut Self) -> Matrix<T> {
        let d = dy.cols();
        let n = lit::<T>(d as f64);
        let mut dx = Matrix::zeros(dy.rows(), d);
        let mut dxhat = vec![T::zero(); d];
        for r in 0..dy.rows() {
            let xh = cache.normalized.row(r);
            let g = dy.row(r);
            for c in 0..d {
                let s = grad.scale.get(0, c) + g[c] * xh[c];
                grad.scale.set(0, c, s);
                let o = grad.offset.get(0, c) + g[c];
                grad.offset.set(0, c, o);
                dxhat[c] = g[c] * self.scale.get(0, c);
            }
            let sum_d: T = dxhat.iter().copied().sum();
            let sum_dx: T = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum();
            let is = cache.inv_std[r];
            for c in 0..d {
                dx.set(r, c, is / n * (n * dxhat[c] - sum_d - xh[c] * sum_dx));
            }
        }
        dx
    }
}

impl<T: Real> Params<T> for LayerNorm<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix<T>)>) {
        out.push((join(prefix, "scale"), &self.scale));
        out.push((join(prefix, "offset"), &self.offset));
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Matrix<T>)>) {
        out.push((join(prefix, "scale"), &mut self.scale));
        out.push((join(prefix, "offset"), &mut self.offset));
    }
}

pub(crate) fn gelu<T: Real>(x: T) -> T {
    let c = lit::<T>((2.0 / std::f64::consts::PI).sqrt());
    let k = lit::<T>(0.044715);
    let half = lit::<T>(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let c = lit::<T>((2.0 / std::f64::consts::PI).sqrt());
    let k = lit::<T>(0.044715);
    let half = lit::<T>(0.5);
    let three = lit::<T>(3.0);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x)
}

/// Position-wise feed-forward block: `down(gelu(up(x)))`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward<T> {
    pub up: Linear<T>,
    pub down: Linear<T>,
}

pub struct FeedForwardCache<T> {
    input: Matrix<T>,
    pre: Matrix<T>,
    act: Matrix<T>,
}

impl<T: Real> FeedForward<T> {
    pub fn new<R: Rng + ?Sized>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            up: Linear::new(dim, hidden, rng),
            down: Linear::new(hidden, dim, rng),
        }
    }

    pub fn forward(&self, x: &Matrix<T>) -> (Matrix<T>, FeedForwardCache<T>) {
        let pre = self.up.forward(x);
        let act = pre.map(gelu);
        let y = self.down.forward(&act);
        (
            y,
            FeedForwardCache {
                input: x.clone(),
                pre,
                act,
            },
        )
    }

    pub fn backward(&self, cache: &FeedForwardCache<T>, dy: &Matrix<T>, grad: &mut Self) -> Matrix<T> {
        let mut dact = self.down.backward(&cache.act, dy, &mut grad.down);
        for (g, &p) in dact.as_mut_slice().iter_mut().zip(cache.pre.as_slice()) {
            *g *= gelu_grad(p);
        }
        self.up.backward(&cache.input, &dact, &mut grad.up)
    }
}

impl<T: Real> Params<T> for FeedForward<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix<T>)>) {
        self.up.collect(&join(prefix, "up"), out);
        self.down.collect(&join(prefix, "down"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Matrix<T>)>) {
        self.up.collect_mut(&join(prefix, "up"), out);
        self.down.collect_mut(&join(prefix, "down"), out);
    }
}

/// Multi-head scaled dot-product attention from a query sequence onto a
/// key/value sequence. Self-attention passes the same matrix twice.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadAttention<T> {
    pub num_heads: usize,
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub output: Linear<T>,
}

pub struct AttentionCache<T> {
    query_in: Matrix<T>,
    context_in: Matrix<T>,
    q: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
    /// Post-softmax weights, one `Lq × Lk` matrix per head.
    pub probs: Vec<Matrix<T>>,
    merged: Matrix<T>,
}

impl<T: Real> MultiHeadAttention<T> {
    pub fn new<R: Rng + ?Sized>(dim: usize, num_heads: usize, rng: &mut R) -> Self {
        assert!(num_heads > 0 && dim % num_heads == 0, "dim divisible by heads");
        Self {
            num_heads,
            query: Linear::new(dim, dim, rng),
            key: Linear::new(dim, dim, rng),
            value: Linear::new(dim, dim, rng),
            output: Linear::new(dim, dim, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.query.in_dim()
    }

    pub fn forward(
        &self,
        query_in: &Matrix<T>,
        context_in: &Matrix<T>,
        key_mask: Option<&[bool]>,
    ) -> (Matrix<T>, AttentionCache<T>) {
        let d = self.dim();
        let dh = d / self.num_heads;
        let scale = T::one() / lit::<T>(dh as f64).sqrt();
        let q = self.query.forward(query_in);
        let k = self.key.forward(context_in);
        let v = self.value.forward(context_in);
        let mut merged = Matrix::zeros(query_in.rows(), d);
        let mut probs = Vec::with_capacity(self.num_heads);
        for h in 0..self.num_heads {
            let qh = q.columns(h * dh, dh);
            let kh = k.columns(h * dh, dh);
            let vh = v.columns(h * dh, dh);
            let mut scores = qh.matmul_t(&kh);
            scores.scale(scale);
            softmax_rows(&mut scores, key_mask);
            merged.set_columns(h * dh, &scores.matmul(&vh));
            probs.push(scores);
        }
        let out = self.output.forward(&merged);
        (
            out,
            AttentionCache {
                query_in: query_in.clone(),
                context_in: context_in.clone(),
                q,
                k,
                v,
                probs,
                merged,
            },
        )
    }

    /// Returns `(dL/dquery_in, dL/dcontext_in)`.
    pub fn backward(
        &self,
        cache: &AttentionCache<T>,
        dy: &Matrix<T>,
        grad: &mut Self,
    ) -> (Matrix<T>, Matrix<T>) {
        let d = self.dim();
        let dh = d / self.num_heads;
        let scale = T::one() / lit::<T>(dh as f64).sqrt();
        let dmerged = self.output.backward(&cache.merged, dy, &mut grad.output);
        let mut dq = Matrix::zeros(cache.q.rows(), d);
        let mut dk = Matrix::zeros(cache.k.rows(), d);
        let mut dv = Matrix::zeros(cache.v.rows(), d);
        for h in 0..self.num_heads {
            let p = &cache.probs[h];
            let qh = cache.q.columns(h * dh, dh);
            let kh = cache.k.columns(h * dh, dh);
            let vh = cache.v.columns(h * dh, dh);
            let dout = dmerged.columns(h * dh, dh);
            dv.set_columns(h * dh, &p.t_matmul(&dout));
            let dp = dout.matmul_t(&vh);
            let mut ds = softmax_rows_backward(p, &dp);
            ds.scale(scale);
            dq.set_columns(h * dh, &ds.matmul(&kh));
            dk.set_columns(h * dh, &ds.t_matmul(&qh));
        }
        let dquery = self.query.backward(&cache.query_in, &dq, &mut grad.query);
        let mut dcontext = self.key.backward(&cache.context_in, &dk, &mut grad.key);
        dcontext.add_assign(&self.value.backward(&cache.context_in, &dv, &mut grad.value));
        (dquery, dcontext)
    }
}

impl<T: Real> Params<T> for MultiHeadAttention<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix<T>)>) {
        self.query.collect(&join(prefix, "query"), out);
        self.key.collect(&join(prefix, "key"), out);
        self.value.collect(&join(prefix, "value"), out);
        self.output.collect(&join(prefix, "output"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Matrix<T>)>) {
        self.query.collect_mut(&join(prefix, "query"), out);
        self.key.collect_mut(&join(prefix, "key"), out);
        self.value.collect_mut(&join(prefix, "value"), out);
        self.output.collect_mut(&join(prefix, "output"), out);
    }
}

/// Inverted dropout mask: entries are `0` or `1 / (1 - rate)`.
pub fn dropout_mask<T: Real, R: Rng + ?Sized>(rows: usize, cols: usize, rate: f64, rng: &mut R) -> Matrix<T> {
    let keep = lit::<T>(1.0 / (1.0 - rate));
    Matrix::from_fn(rows, cols, |_, _| {
        if rng.random::<f64>() < rate {
            T::zero()
        } else {
            keep
        }
    })
}

pub fn hadamard<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    assert_eq!(a.shape(), b.shape());
    let data = a.as_slice().iter().zip(b.as_slice()).map(|(&x, &y)| x * y).collect();
    Matrix::from_vec(a.rows(), a.cols(), data)
}
