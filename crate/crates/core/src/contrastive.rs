//! Soft-target contrastive loss, simplex interpolation and the networks that
//! learn the interpolation index.

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EmbeddingBatch, INIT_STD};
use crate::error::{Error, Result};
use crate::nn::{
    l2_normalize_rows, l2_normalize_rows_backward, log_softmax_rows, sigmoid, softmax_rows, softmax_rows_backward,
    Linear, Parameters, ProjectionHead, ProjectionHeadCache,
};

const STOCHASTIC_TOL: f64 = 1e-6;

fn check_tau(tau: f64) -> Result<()> {
    if tau.is_finite() && tau > 0.0 {
        Ok(())
    } else {
        Err(Error::config(format!("temperature must be positive, got {tau}")))
    }
}

fn check_same_shape(a: &Array2<f64>, b: &Array2<f64>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!("{what}: {:?} vs {:?}", a.dim(), b.dim())));
    }
    if a.nrows() == 0 {
        return Err(Error::shape(format!("{what}: empty batch")));
    }
    Ok(())
}

/// `A Bᵀ / τ`.
pub fn cross_logits(a: &Array2<f64>, b: &Array2<f64>, tau: f64) -> Result<Array2<f64>> {
    check_tau(tau)?;
    check_same_shape(a, b, "cross logits")?;
    Ok(a.dot(&b.t()) / tau)
}

/// Row softmax of the averaged self-similarities divided by `τ`.
pub fn soft_targets(sim_a: &Array2<f64>, sim_b: &Array2<f64>, tau: f64) -> Result<Array2<f64>> {
    check_tau(tau)?;
    check_same_shape(sim_a, sim_b, "self similarities")?;
    if sim_a.nrows() != sim_a.ncols() {
        return Err(Error::shape("similarity matrices must be square"));
    }
    if sim_a.iter().chain(sim_b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            layer: 0,
            msg: "non-finite similarity".into(),
        });
    }
    Ok(softmax_rows(&((sim_a + sim_b) / (2.0 * tau))))
}

fn check_row_stochastic(t: &Array2<f64>) -> Result<()> {
    for (i, row) in t.rows().into_iter().enumerate() {
        if row.iter().any(|&v| v < 0.0) || (row.sum() - 1.0).abs() > STOCHASTIC_TOL {
            return Err(Error::contract(format!("targets row {i} is not a probability distribution")));
        }
    }
    Ok(())
}

/// Symmetric soft cross-entropy over rows and columns, averaged over the batch.
pub fn contrastive_loss(logits: &Array2<f64>, targets: &Array2<f64>) -> Result<f64> {
    check_same_shape(logits, targets, "logits vs targets")?;
    check_row_stochastic(targets)?;
    let n = logits.nrows() as f64;
    let rows = -(targets * &log_softmax_rows(logits)).sum() / n;
    let cols = -(&targets.t() * &log_softmax_rows(&logits.t().to_owned())).sum() / n;
    Ok(0.5 * (rows + cols))
}

/// `∂loss/∂logits` and `∂loss/∂targets` of [`contrastive_loss`].
pub fn contrastive_loss_grads(logits: &Array2<f64>, targets: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let n = logits.nrows() as f64;
    let lt = logits.t().to_owned();
    let p_rows = softmax_rows(logits);
    let p_cols = softmax_rows(&lt);
    let row_mass = targets.sum_axis(Axis(1)).insert_axis(Axis(1));
    let col_mass = targets.sum_axis(Axis(0)).insert_axis(Axis(1));
    let d_rows = &p_rows * &row_mass - targets;
    let d_cols = (&p_cols * &col_mass - targets.t()).reversed_axes();
    let d_logits = (d_rows + d_cols) / (2.0 * n);
    let d_targets = -(log_softmax_rows(logits) + log_softmax_rows(&lt).reversed_axes()) / (2.0 * n);
    (d_logits, d_targets)
}

/// Loss value plus gradients for one (anchor, trainable) embedding pair.
#[derive(Debug, Clone)]
pub struct PairLoss {
    pub loss: f64,
    pub logits: Array2<f64>,
    pub targets: Array2<f64>,
    pub d_anchor: Array2<f64>,
    pub d_train: Array2<f64>,
    pub d_tau: f64,
}

impl PairLoss {
    /// Fraction of rows whose logits argmax is the diagonal entry.
    pub fn diagonal_accuracy(&self) -> f64 {
        diagonal_accuracy(&self.logits)
    }
}

pub fn diagonal_accuracy(logits: &Array2<f64>) -> f64 {
    let hits = logits
        .rows()
        .into_iter()
        .enumerate()
        .filter(|(i, row)| {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc });
            best.0 == *i
        })
        .count();
    hits as f64 / logits.nrows() as f64
}

/// Forward and backward through logits, self-similarities, targets and loss.
/// Gradients flow through the targets as well as the logits.
pub fn pair_loss(anchor: &Array2<f64>, train: &Array2<f64>, tau: f64) -> Result<PairLoss> {
    let logits = cross_logits(anchor, train, tau)?;
    let sim_a = anchor.dot(&anchor.t());
    let sim_b = train.dot(&train.t());
    let avg = (&sim_a + &sim_b) / 2.0;
    let targets = soft_targets(&sim_a, &sim_b, tau)?;
    let loss = contrastive_loss(&logits, &targets)?;
    let (d_logits, d_targets) = contrastive_loss_grads(&logits, &targets);
    let d_pre = softmax_rows_backward(&targets, &d_targets);
    let d_avg = &d_pre / tau;
    let d_sim = (&d_avg + &d_avg.t()) / 2.0;
    let d_anchor = d_logits.dot(train) / tau + d_sim.dot(anchor);
    let d_train = d_logits.t().dot(anchor) / tau + d_sim.dot(train);
    let d_tau = -(&d_logits * &logits).sum() / tau - (&d_pre * &avg).sum() / (tau * tau);
    Ok(PairLoss {
        loss,
        logits,
        targets,
        d_anchor,
        d_train,
        d_tau,
    })
}

/// Loss between an interpolated batch and the remaining modality. Both must
/// come from the same programs in the same order.
pub fn intermediate_loss(h_interp: &EmbeddingBatch, h_other: &EmbeddingBatch, tau: f64) -> Result<PairLoss> {
    if h_interp.batch_key != h_other.batch_key {
        return Err(Error::contract(
            "interpolated and contrast embeddings come from different batches",
        ));
    }
    pair_loss(&h_other.matrix, &h_interp.matrix, tau)
}

/// Values of the interpolation index, `n x 1` or `n x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpolationIndex(pub Array2<f64>);

pub struct InterpCache {
    a: Array2<f64>,
    b: Array2<f64>,
    lambda: Array2<f64>,
    renorm: Option<(Array2<f64>, ndarray::Array1<f64>)>,
}

/// `λ ⊙ A + (1 - λ) ⊙ B`, with `λ` broadcast over features when it has one column.
pub fn interpolate(a: &Array2<f64>, b: &Array2<f64>, lambda: &InterpolationIndex, renorm: bool) -> Result<Array2<f64>> {
    Ok(interpolate_with_cache(a, b, lambda, renorm)?.0)
}

/// Two-sided form that is exact at both endpoints and when `x == y`.
fn lerp(x: f64, y: f64, l: f64) -> f64 {
    if l <= 0.5 {
        y + l * (x - y)
    } else {
        x + (1.0 - l) * (y - x)
    }
}

pub fn interpolate_with_cache(
    a: &Array2<f64>,
    b: &Array2<f64>,
    lambda: &InterpolationIndex,
    renorm: bool,
) -> Result<(Array2<f64>, InterpCache)> {
    check_same_shape(a, b, "interpolation inputs")?;
    let lam = &lambda.0;
    if lam.nrows() != a.nrows() || (lam.ncols() != 1 && lam.ncols() != a.ncols()) {
        return Err(Error::shape(format!(
            "interpolation index {:?} does not broadcast to {:?}",
            lam.dim(),
            a.dim()
        )));
    }
    if lam.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::contract("interpolation index outside [0, 1]"));
    }
    let full = lam.broadcast(a.raw_dim()).expect("checked broadcast").to_owned();
    let mut mix = b.clone();
    ndarray::Zip::from(&mut mix).and(a).and(&full).for_each(|m, &x, &l| *m = lerp(x, *m, l));
    let (out, renorm_cache) = if renorm {
        let (u, n) = l2_normalize_rows(&mix);
        (u.clone(), Some((u, n)))
    } else {
        (mix, None)
    };
    Ok((
        out,
        InterpCache {
            a: a.clone(),
            b: b.clone(),
            lambda: full,
            renorm: renorm_cache,
        },
    ))
}

/// Gradients `(dA, dB, dλ)`; `dλ` is summed over features when `λ` had one column.
pub fn interpolate_backward(
    cache: &InterpCache,
    lambda_cols: usize,
    d_out: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let d_mix = match &cache.renorm {
        Some((u, n)) => l2_normalize_rows_backward(u, n, d_out),
        None => d_out.clone(),
    };
    let d_a = &cache.lambda * &d_mix;
    let d_b = (1.0 - &cache.lambda) * &d_mix;
    let d_full = (&cache.a - &cache.b) * &d_mix;
    let d_lambda = if lambda_cols == 1 {
        d_full.sum_axis(Axis(1)).insert_axis(Axis(1))
    } else {
        d_full
    };
    (d_a, d_b, d_lambda)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterpMode {
    /// One index per example.
    Linear,
    /// One index per example and feature.
    Nonlinear,
    /// One index shared by the whole batch (mean of the per-example indices).
    Scalar,
}

impl InterpMode {
    pub fn tag(self) -> &'static str {
        match self {
            InterpMode::Linear => "linear",
            InterpMode::Nonlinear => "nonlinear",
            InterpMode::Scalar => "scalar",
        }
    }
}

/// Projection head over `[H1, H2]`, a dense output layer and a sigmoid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpNet {
    pub mode: InterpMode,
    pub head: ProjectionHead,
    pub out: Linear,
}

pub struct InterpNetCache {
    head: ProjectionHeadCache,
    hidden: Array2<f64>,
    raw: Array2<f64>,
    d: usize,
}

impl Parameters for InterpNet {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a [f64])) {
        self.head.visit(f);
        self.out.visit(f);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut [f64])) {
        self.head.visit_mut(f);
        self.out.visit_mut(f);
    }
}

impl InterpNet {
    pub fn new(seed: u64, mode: InterpMode, d: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head = ProjectionHead::new(&mut rng, 2 * d, d, INIT_STD);
        let out = Linear::new(&mut rng, d, Self::out_dim(mode, d), INIT_STD);
        Self { mode, head, out }
    }

    pub fn zeros(mode: InterpMode, d: usize) -> Self {
        Self {
            mode,
            head: ProjectionHead::zeros(2 * d, d),
            out: Linear::zeros(d, Self::out_dim(mode, d)),
        }
    }

    fn out_dim(mode: InterpMode, d: usize) -> usize {
        match mode {
            InterpMode::Nonlinear => d,
            InterpMode::Linear | InterpMode::Scalar => 1,
        }
    }

    pub fn dim(&self) -> usize {
        self.head.dim_out()
    }

    pub fn index(&self, h1: &Array2<f64>, h2: &Array2<f64>) -> Result<InterpolationIndex> {
        Ok(self.forward(h1, h2)?.0)
    }

    pub fn forward(&self, h1: &Array2<f64>, h2: &Array2<f64>) -> Result<(InterpolationIndex, InterpNetCache)> {
        check_same_shape(h1, h2, "interp net inputs")?;
        let d = self.dim();
        if h1.ncols() != d {
            return Err(Error::shape(format!(
                "interp net built for d={d} got inputs with d={}",
                h1.ncols()
            )));
        }
        let x = ndarray::concatenate(Axis(1), &[h1.view(), h2.view()]).expect("same rows");
        let (hidden, head) = self.head.forward(&x);
        let raw = self.out.forward(&hidden);
        let mut lam = raw.mapv(sigmoid);
        if self.mode == InterpMode::Scalar {
            let mean = lam.mean().expect("non-empty");
            lam.fill(mean);
        }
        Ok((InterpolationIndex(lam), InterpNetCache { head, hidden, raw, d }))
    }

    /// Parameter gradients and `(dH1, dH2)` for an upstream gradient on `λ`.
    pub fn backward(&self, cache: &InterpNetCache, d_lambda: &Array2<f64>) -> (InterpNet, Array2<f64>, Array2<f64>) {
        let mut grad = self.zeros_like();
        let d_lam = if self.mode == InterpMode::Scalar {
            let n = d_lambda.nrows() as f64;
            Array2::from_elem(d_lambda.raw_dim(), d_lambda.sum() / n)
        } else {
            d_lambda.clone()
        };
        let s = cache.raw.mapv(sigmoid);
        let d_raw = &d_lam * &(&s * &(1.0 - &s));
        let d_hidden = self.out.backward(&cache.hidden, &d_raw, &mut grad.out);
        let dx = self.head.backward(&cache.head, &d_hidden, &mut grad.head);
        let d = cache.d;
        let dh1 = dx.slice(ndarray::s![.., ..d]).to_owned();
        let dh2 = dx.slice(ndarray::s![.., d..]).to_owned();
        (grad, dh1, dh2)
    }
}

/// Result of interpolating two embeddings with a learned index and
/// contrasting the mix against a third.
pub struct InterpStep {
    pub loss: PairLoss,
    pub lambda: InterpolationIndex,
    pub d_h1: Array2<f64>,
    pub d_h2: Array2<f64>,
    pub d_other: Array2<f64>,
    pub d_net: InterpNet,
}

/// `λ = net(H1, H2)`, `I = Γ(H1, H2; λ)`, loss of `(other, I)`.
pub fn interp_step(
    net: &InterpNet,
    h1: &EmbeddingBatch,
    h2: &EmbeddingBatch,
    other: &EmbeddingBatch,
    tau: f64,
    renorm: bool,
) -> Result<InterpStep> {
    if h1.batch_key != h2.batch_key {
        return Err(Error::contract("interpolation inputs come from different batches"));
    }
    let (lambda, net_cache) = net.forward(&h1.matrix, &h2.matrix)?;
    let (mix, icache) = interpolate_with_cache(&h1.matrix, &h2.matrix, &lambda, renorm)?;
    let interp = EmbeddingBatch::new(mix, h1.modality, true, h1.batch_key);
    let loss = intermediate_loss(&interp, other, tau)?;
    let (mut d_h1, mut d_h2, d_lam) = interpolate_backward(&icache, lambda.0.ncols(), &loss.d_train);
    let (d_net, n1, n2) = net.backward(&net_cache, &d_lam);
    d_h1 += &n1;
    d_h2 += &n2;
    let d_other = loss.d_anchor.clone();
    Ok(InterpStep {
        loss,
        lambda,
        d_h1,
        d_h2,
        d_other,
        d_net,
    })
}
