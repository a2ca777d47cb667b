//! Dense layers with explicit forward caches and backward passes.
//!
//! Everything is `f64` so that central finite differences can validate the
//! analytic gradients to tight tolerances.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const LN_EPS: f64 = 1e-5;

/// A bag of parameter tensors that optimisers, checksums and gradient
/// accumulators can walk in a fixed order.
pub trait Parameters: Clone {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a [f64]));
    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut [f64]));

    fn slices(&self) -> Vec<&[f64]> {
        let mut v = Vec::new();
        self.visit(&mut |s| v.push(s));
        v
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = Vec::new();
        self.visit_mut(&mut |s| v.push(s));
        v
    }

    fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(&mut |s| s.fill(0.0));
        z
    }

    fn accumulate(&mut self, other: &Self) {
        let src = other.slices();
        for (dst, src) in self.slices_mut().into_iter().zip(src) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }

    fn scale(&mut self, factor: f64) {
        self.visit_mut(&mut |s| s.iter_mut().for_each(|x| *x *= factor));
    }

    fn sq_norm(&self) -> f64 {
        self.slices().iter().flat_map(|s| s.iter()).map(|x| x * x).sum()
    }

    fn flat(&self) -> Vec<f64> {
        self.slices().concat()
    }

    fn all_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }

    /// Hex SHA-256 over the little-endian bytes of every parameter.
    fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for s in self.slices() {
            for x in s {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

fn slice1(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("contiguous parameter")
}

fn slice2(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("contiguous parameter")
}

fn slice1_mut(a: &mut Array1<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("contiguous parameter")
}

fn slice2_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("contiguous parameter")
}

pub fn normal_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

/// `y = x W + b` with `W` stored as `in x out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize, std: f64) -> Self {
        Self {
            weight: normal_matrix(rng, fan_in, fan_out, std),
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.weight += &x.t().dot(dy);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight.t())
    }
}

impl Parameters for Linear {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a [f64])) {
        f(slice2(&self.weight));
        f(slice1(&self.bias));
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut [f64])) {
        f(slice2_mut(&mut self.weight));
        f(slice1_mut(&mut self.bias));
    }
}

/// Row-wise layer normalisation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let d = x.ncols() as f64;
        let mean = x.sum_axis(Axis(1)) / d;
        let centered = x - &mean.insert_axis(Axis(1));
        let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / d;
        let rstd = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
        let xhat = &centered * &rstd.view().insert_axis(Axis(1));
        let y = &xhat * &self.gamma + &self.beta;
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: &Array2<f64>, grad: &mut LayerNorm) -> Array2<f64> {
        grad.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let dxhat = dy * &self.gamma;
        let d = dy.ncols() as f64;
        let mean_dxhat = dxhat.sum_axis(Axis(1)) / d;
        let mean_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(1)) / d;
        let inner = &dxhat
            - &mean_dxhat.insert_axis(Axis(1))
            - &(&cache.xhat * &mean_dxhat_xhat.insert_axis(Axis(1)));
        inner * cache.rstd.view().insert_axis(Axis(1))
    }
}

impl Parameters for LayerNorm {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a [f64])) {
        f(slice1(&self.gamma));
        f(slice1(&self.beta));
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut [f64])) {
        f(slice1_mut(&mut self.gamma));
        f(slice1_mut(&mut self.beta));
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()))
}

pub fn gelu_backward(x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut out = dy.clone();
    ndarray::Zip::from(&mut out).and(x).for_each(|g, &v| {
        let t = (GELU_C * (v + 0.044715 * v * v * v)).tanh();
        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
        *g *= 0.5 * (1.0 + t) + 0.5 * v * dt;
    });
    out
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// `dL/dx` for `p = softmax_rows(x)` given `dL/dp`.
pub fn softmax_rows_backward(p: &Array2<f64>, dp: &Array2<f64>) -> Array2<f64> {
    let dot = (dp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
    p * &(dp - &dot)
}

/// Linear -> GELU -> Linear, plus a residual from the first projection, then LayerNorm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionHead {
    pub project: Linear,
    pub fc: Linear,
    pub norm: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct ProjectionHeadCache {
    input: Array2<f64>,
    projected: Array2<f64>,
    activated: Array2<f64>,
    norm: LayerNormCache,
}

impl ProjectionHead {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, dim_in: usize, dim_out: usize, std: f64) -> Self {
        Self {
            project: Linear::new(rng, dim_in, dim_out, std),
            fc: Linear::new(rng, dim_out, dim_out, std),
            norm: LayerNorm::new(dim_out),
        }
    }

    pub fn zeros(dim_in: usize, dim_out: usize) -> Self {
        Self {
            project: Linear::zeros(dim_in, dim_out),
            fc: Linear::zeros(dim_out, dim_out),
            norm: LayerNorm {
                gamma: Array1::zeros(dim_out),
                beta: Array1::zeros(dim_out),
            },
        }
    }

    pub fn dim_out(&self) -> usize {
        self.project.fan_out()
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, ProjectionHeadCache) {
        let projected = self.project.forward(x);
        let activated = gelu(&projected);
        let pre = self.fc.forward(&activated) + &projected;
        let (y, norm) = self.norm.forward(&pre);
        (
            y,
            ProjectionHeadCache {
                input: x.clone(),
                projected,
                activated,
                norm,
            },
        )
    }

    pub fn backward(&self, cache: &ProjectionHeadCache, dy: &Array2<f64>, grad: &mut ProjectionHead) -> Array2<f64> {
        let dpre = self.norm.backward(&cache.norm, dy, &mut grad.norm);
        let dact = self.fc.backward(&cache.activated, &dpre, &mut grad.fc);
        let dproj = gelu_backward(&cache.projected, &dact) + &dpre;
        self.project.backward(&cache.input, &dproj, &mut grad.project)
    }
}

impl Parameters for ProjectionHead {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a [f64])) {
        self.project.visit(f);
        self.fc.visit(f);
        self.norm.visit(f);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut [f64])) {
        self.project.visit_mut(f);
        self.fc.visit_mut(f);
        self.norm.visit_mut(f);
    }
}

/// Row-wise L2 normalisation; returns the normalised rows and the original norms.
pub fn l2_normalize_rows(x: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let norms = x.map_axis(Axis(1), |r| r.dot(&r).sqrt().max(1e-12));
    let y = x / &norms.view().insert_axis(Axis(1));
    (y, norms)
}

pub fn l2_normalize_rows_backward(y: &Array2<f64>, norms: &Array1<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let proj = (y * dy).sum_axis(Axis(1)).insert_axis(Axis(1));
    (dy - &(y * &proj)) / norms.view().insert_axis(Axis(1))
}

#[cfg(test)]
pub(crate) mod testutil {
    use ndarray::Array2;

    /// Central difference of a scalar function w.r.t. every entry of `x`.
    pub fn numeric_grad(x: &Array2<f64>, eps: f64, mut f: impl FnMut(&Array2<f64>) -> f64) -> Array2<f64> {
        let mut g = Array2::zeros(x.raw_dim());
        let mut xp = x.clone();
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let orig = xp[[r, c]];
            xp[[r, c]] = orig + eps;
            let fp = f(&xp);
            xp[[r, c]] = orig - eps;
            let fm = f(&xp);
            xp[[r, c]] = orig;
            g[[r, c]] = (fp - fm) / (2.0 * eps);
        }
        g
    }

    pub fn max_rel_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let scale = a.iter().chain(b.iter()).fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
    }
}

#[cfg(test)]
mod tests {
    use super::testutil::*;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(seed: u64, r: usize, c: usize) -> Array2<f64> {
        normal_matrix(&mut ChaCha8Rng::seed_from_u64(seed), r, c, 1.0)
    }

    #[test]
    fn layernorm_input_gradient() {
        let mut ln = LayerNorm::new(5);
        ln.gamma = rand_mat(1, 1, 5).row(0).to_owned();
        let x = rand_mat(2, 3, 5);
        let w = rand_mat(3, 3, 5);
        let (_, cache) = ln.forward(&x);
        let mut g = ln.zeros_like();
        let dx = ln.backward(&cache, &w, &mut g);
        let num = numeric_grad(&x, 1e-6, |xx| (ln.forward(xx).0 * &w).sum());
        assert!(max_rel_err(&dx, &num) < 1e-6);
    }

    #[test]
    fn projection_head_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let head = ProjectionHead::new(&mut rng, 4, 3, 0.5);
        let x = rand_mat(4, 2, 4);
        let w = rand_mat(5, 2, 3);
        let (_, cache) = head.forward(&x);
        let mut g = head.zeros_like();
        let dx = head.backward(&cache, &w, &mut g);
        let num = numeric_grad(&x, 1e-6, |xx| (head.forward(xx).0 * &w).sum());
        assert!(max_rel_err(&dx, &num) < 1e-6);
        let num_w = numeric_grad(&head.project.weight, 1e-6, |ww| {
            let mut h = head.clone();
            h.project.weight = ww.clone();
            (h.forward(&x).0 * &w).sum()
        });
        assert!(max_rel_err(&g.project.weight, &num_w) < 1e-6);
    }

    #[test]
    fn l2_normalize_gradient() {
        let x = rand_mat(6, 3, 4);
        let w = rand_mat(7, 3, 4);
        let (y, n) = l2_normalize_rows(&x);
        let dx = l2_normalize_rows_backward(&y, &n, &w);
        let num = numeric_grad(&x, 1e-6, |xx| (l2_normalize_rows(xx).0 * &w).sum());
        assert!(max_rel_err(&dx, &num) < 1e-6);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_backward() {
        let x = rand_mat(8, 3, 5) * 10.0;
        let p = softmax_rows(&x);
        for r in p.rows() {
            assert!((r.sum() - 1.0).abs() < 1e-12);
        }
        let w = rand_mat(9, 3, 5);
        let dx = softmax_rows_backward(&p, &w);
        let num = numeric_grad(&x, 1e-6, |xx| (softmax_rows(xx) * &w).sum());
        assert!(max_rel_err(&dx, &num) < 1e-6);
    }

    #[test]
    fn checksum_tracks_bytes() {
        let mut l = Linear::new(&mut ChaCha8Rng::seed_from_u64(1), 3, 2, 0.02);
        let before = l.checksum();
        assert_eq!(before, l.clone().checksum());
        l.bias[0] += 1e-300;
        assert_ne!(before, l.checksum());
        assert_eq!(l.num_params(), 8);
    }
}
