//! One-dimensional C-Abstractor: convolutional residual blocks around an
//! adaptive mean pool that fixes the output length.

use rand::Rng;

use crate::nn::{gelu, gelu_grad, glorot, join, LayerNorm, LayerNormCache, Params};
use crate::tensor::{lit, Matrix, Real};

use super::AggregationError;

/// Same-padded 1-D convolution over the row (token) axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv1d<T> {
    pub kernel: usize,
    /// `(kernel · in) × out`; tap `t` covers rows `t·in .. (t+1)·in`.
    pub weight: Matrix<T>,
    pub bias: Matrix<T>,
}

impl<T: Real> Conv1d<T> {
    pub fn new<R: Rng + ?Sized>(dim: usize, kernel: usize, rng: &mut R) -> Self {
        Self {
            kernel,
            weight: glorot(kernel * dim, dim, rng),
            bias: Matrix::zeros(1, dim),
        }
    }

    fn unfold(&self, x: &Matrix<T>) -> Matrix<T> {
        let (len, d) = x.shape();
        let half = (self.kernel / 2) as isize;
        let mut cols = Matrix::zeros(len, self.kernel * d);
        for i in 0..len {
            for t in 0..self.kernel {
                let src = i as isize + t as isize - half;
                if src >= 0 && (src as usize) < len {
                    cols.row_mut(i)[t * d..(t + 1) * d].copy_from_slice(x.row(src as usize));
                }
            }
        }
        cols
    }

    pub fn forward(&self, x: &Matrix<T>) -> (Matrix<T>, Matrix<T>) {
        let cols = self.unfold(x);
        let mut y = cols.matmul(&self.weight);
        y.add_row_broadcast(&self.bias);
        (y, cols)
    }

    pub fn backward(&self, cols: &Matrix<T>, dy: &Matrix<T>, grad: &mut Self) -> Matrix<T> {
        grad.weight.add_assign(&cols.t_matmul(dy));
        grad.bias.add_assign(&dy.sum_rows());
        let dcols = dy.matmul_t(&self.weight);
        let len = dy.rows();
        let d = self.weight.cols();
        let half = (self.kernel / 2) as isize;
        let mut dx = Matrix::zeros(len, d);
        for i in 0..len {
            for t in 0..self.kernel {
                let src = i as isize + t as isize - half;
                if src >= 0 && (src as usize) < len {
                    let g = &dcols.row(i)[t * d..(t + 1) * d];
                    dx.row_mut(src as usize).iter_mut().zip(g).for_each(|(a, &b)| *a += b);
                }
            }
        }
        dx
    }
}

impl<T: Real> Params<T> for Conv1d<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix<T>)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Matrix<T>)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

/// `x + conv(gelu(LN(x)))`
#[derive(Clone, Debug, PartialEq)]
pub struct ConvResidualBlock<T> {
    pub norm: LayerNorm<T>,
    pub conv: Conv1d<T>,
}

struct BlockCache<T> {
    norm: LayerNormCache<T>,
    pre: Matrix<T>,
    cols: Matrix<T>,
}

impl<T: Real> ConvResidualBlock<T> {
    fn forward(&self, x: &Matrix<T>) -> (Matrix<T>, BlockCache<T>) {
        let (pre, norm) = self.norm.forward(x);
        let act = pre.map(gelu);
        let (y, cols) = self.conv.forward(&act);
        (x.add(&y), BlockCache { norm, pre, cols })
    }

    fn backward(&self, cache: &BlockCache<T>, dy: &Matrix<T>, grad: &mut Self) -> Matrix<T> {
        let mut dact = self.conv.backward(&cache.cols, dy, &mut grad.conv);
        for (g, &p) in dact.as_mut_slice().iter_mut().zip(cache.pre.as_slice()) {
            *g *= gelu_grad(p);
        }
        let mut dx = self.norm.backward(&cache.norm, &dact, &mut grad.norm);
        dx.add_assign(dy);
        dx
    }
}

impl<T: Real> Params<T> for ConvResidualBlock<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix<T>)>) {
        self.norm.collect(&join(prefix, "norm"), out);
        self.conv.collect(&join(prefix, "conv"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Matrix<T>)>) {
        self.norm.collect_mut(&join(prefix, "norm"), out);
        self.conv.collect_mut(&join(prefix, "conv"), out);
    }
}

/// Window `i` of pooling `len` rows into `n` covers
/// `[floor(i·len/n), ceil((i+1)·len/n))`.
pub fn adaptive_pool_windows(len: usize, n: usize) -> Vec<(usize, usize)> {
    (0..n)
        .map(|i| ((i * len) / n, ((i + 1) * len).div_ceil(n)))
        .collect()
}

pub fn adaptive_mean_pool<T: Real>(x: &Matrix<T>, n: usize) -> Matrix<T> {
    let d = x.cols();
    let mut out = Matrix::zeros(n, d);
    for (i, (s, e)) in adaptive_pool_windows(x.rows(), n).into_iter().enumerate() {
        let inv = T::one() / lit::<T>((e - s) as f64);
        for r in s..e {
            for (o, &v) in out.row_mut(i).iter_mut().zip(x.row(r)) {
                *o += v * inv;
            }
        }
    }
    out
}

fn adaptive_mean_pool_backward<T: Real>(dy: &Matrix<T>, len: usize) -> Matrix<T> {
    let d = dy.cols();
    let mut dx = Matrix::zeros(len, d);
    for (i, (s, e)) in adaptive_pool_windows(len, dy.rows()).into_iter().enumerate() {
        let inv = T::one() / lit::<T>((e - s) as f64);
        for r in s..e {
            for (o, &g) in dx.row_mut(r).iter_mut().zip(dy.row(i)) {
                *o += g * inv;
            }
        }
    }
    dx
}

#[derive(Clone, Debug, PartialEq)]
pub struct CAbstractor<T> {
    pub dim: usize,
    pub num_tokens: usize,
    pub pre: Vec<ConvResidualBlock<T>>,
    pub post: Vec<ConvResidualBlock<T>>,
}

pub struct AbstractorCache<T> {
    pre: Vec<BlockCache<T>>,
    post: Vec<BlockCache<T>>,
    input_len: usize,
}

impl<T: Real> CAbstractor<T> {
    pub fn new<R: Rng + ?Sized>(dim: usize, kernel: usize, residual_layers: usize, num_tokens: usize, rng: &mut R) -> Self {
        let mut block = || ConvResidualBlock {
            norm: LayerNorm::new(dim),
            conv: Conv1d::new(dim, kernel, rng),
        };
        let pre = (0..residual_layers).map(|_| block()).collect();
        let post = (0..residual_layers).map(|_| block()).collect();
        Self {
            dim,
            num_tokens,
            pre,
            post,
        }
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<(Matrix<T>, AbstractorCache<T>), AggregationError> {
        if x.cols() != self.dim {
            return Err(AggregationError::ShapeMismatch {
                expected: self.dim,
                found: x.cols(),
            });
        }
        if x.rows() == 0 {
            return Err(AggregationError::EmptyInput);
        }
        let mut h = x.clone();
        let mut pre = Vec::with_capacity(self.pre.len());
        for b in &self.pre {
            let (y, c) = b.forward(&h);
            h = y;
            pre.push(c);
        }
        h = adaptive_mean_pool(&h, self.num_tokens);
        let mut post = Vec::with_capacity(self.post.len());
        for b in &self.post {
            let (y, c) = b.forward(&h);
            h = y;
            post.push(c);
        }
        Ok((
            h,
            AbstractorCache {
                pre,
                post,
                input_len: x.rows(),
            },
        ))
    }

    pub fn backward(&self, cache: &AbstractorCache<T>, dy: &Matrix<T>, grad: &mut Self) -> Matrix<T> {
        let mut g = dy.clone();
        for ((b, c), bg) in self.post.iter().zip(&cache.post).zip(grad.post.iter_mut()).rev() {
            g = b.backward(c, &g, bg);
        }
        g = adaptive_mean_pool_backward(&g, cache.input_len);
        for ((b, c), bg) in self.pre.iter().zip(&cache.pre).zip(grad.pre.iter_mut()).rev() {
            g = b.backward(c, &g, bg);
        }
        g
    }
}

impl<T: Real> Params<T> for CAbstractor<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix<T>)>) {
        self.pre.collect(&join(prefix, "pre"), out);
        self.post.collect(&join(prefix, "post"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Matrix<T>)>) {
        self.pre.collect_mut(&join(prefix, "pre"), out);
        self.post.collect_mut(&join(prefix, "post"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::nn::normal;
    use crate::rng;
    use crate::tensor::dot;

    /// Reference pooling: scan every input row and keep those inside the
    /// real-valued window bounds.
    fn brute_force_pool(x: &Matrix<f64>, n: usize) -> Matrix<f64> {
        let len = x.rows();
        Matrix::from_fn(n, x.cols(), |i, c| {
            let lo = ((i * len) as f64 / n as f64).floor();
            let hi = (((i + 1) * len) as f64 / n as f64).ceil();
            let rows: Vec<usize> = (0..len).filter(|&r| (r as f64) >= lo && (r as f64) < hi).collect();
            rows.iter().map(|&r| x.get(r, c)).sum::<f64>() / rows.len() as f64
        })
    }

    #[test]
    fn windows_for_64_to_8() {
        let w = adaptive_pool_windows(64, 8);
        assert_eq!(w, (0..8).map(|i| (8 * i, 8 * i + 8)).collect::<Vec<_>>());
        // Uneven and shorter-than-output inputs still give non-empty windows.
        for len in 1..40 {
            for (s, e) in adaptive_pool_windows(len, 8) {
                assert!(s < e && e <= len);
            }
        }
    }

    #[test]
    fn pooling_matches_brute_force() {
        let mut r = rng::stream(4, "pool");
        for len in [1, 3, 7, 8, 13, 64, 65] {
            let x: Matrix<f64> = normal(len, 4, 1.0, &mut r);
            let got = adaptive_mean_pool(&x, 8);
            let want = brute_force_pool(&x, 8);
            for (a, b) in got.as_slice().iter().zip(want.as_slice()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_rows_pass_through_identity_blocks() {
        let mut r = rng::stream(1, "abs");
        let mut a = CAbstractor::<f64>::new(6, 3, 2, 8, &mut r);
        for b in a.pre.iter_mut().chain(a.post.iter_mut()) {
            b.conv.weight.fill(0.0);
        }
        let row = vec![0.5, -1.0, 2.0, 0.0, 3.0, 1.5];
        let x = Matrix::from_rows(&vec![row.clone(); 21]);
        let (y, _) = a.forward(&x).unwrap();
        assert_eq!(y.shape(), (8, 6));
        for i in 0..8 {
            for (v, w) in y.row(i).iter().zip(&row) {
                assert!((v - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_for_any_length() {
        let mut r = rng::stream(2, "abs");
        let a = CAbstractor::<f32>::new(8, 3, 2, 8, &mut r);
        for len in [1, 2, 9, 64] {
            let x: Matrix<f32> = normal(len, 8, 1.0, &mut r);
            assert_eq!(a.forward(&x).unwrap().0.shape(), (8, 8));
        }
        assert!(a.forward(&Matrix::zeros(3, 7)).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut r = rng::stream(3, "abs");
        let a = CAbstractor::<f64>::new(6, 3, 2, 4, &mut r);
        let x: Matrix<f64> = normal(11, 6, 1.0, &mut r);
        let up: Matrix<f64> = normal(4, 6, 1.0, &mut r);
        let (_, cache) = a.forward(&x).unwrap();
        let mut g = a.zeros_like();
        let dx = a.backward(&cache, &up, &mut g);
        let f = |p: &CAbstractor<f64>, x: &Matrix<f64>| dot(p.forward(x).unwrap().0.as_slice(), up.as_slice());
        let (worst, at) = gradcheck::check(&a, &g, 1e-5, |p| f(p, &x));
        assert!(worst < 1e-4, "worst {worst} at {at}");
        for i in 0..x.len() {
            let mut p = x.clone();
            p.as_mut_slice()[i] += 1e-5;
            let mut m = x.clone();
            m.as_mut_slice()[i] -= 1e-5;
            let fd = (f(&a, &p) - f(&a, &m)) / 2e-5;
            assert!(gradcheck::rel_error(dx.as_slice()[i], fd) < 1e-4);
        }
    }
}
