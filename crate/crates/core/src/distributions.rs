//! Diagonal Gaussians and Bernoulli images, both as plain values and as tape nodes.

use std::f64::consts::PI;

use crate::error::{contract, Result};
use crate::tape::kernels::softplus;
use crate::tape::{Tape, Var};

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

/// Diagonal Gaussian with a flat parameter layout; `shape` describes how the flat
/// vectors map onto a latent slab (e.g. `[C, R, R]`).
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    mean: Vec<f64>,
    log_var: Vec<f64>,
    shape: Vec<usize>,
}

impl DiagGaussian {
    /// Builds the distribution, clamping `log_var` into `[-10, 10]`.
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        contract!(mean.len() == n && log_var.len() == n, "DiagGaussian: mean {} / log_var {} vs shape {:?}", mean.len(), log_var.len(), shape);
        let log_var = log_var.into_iter().map(|v| v.clamp(LOG_VAR_MIN, LOG_VAR_MAX)).collect();
        Ok(Self {
            mean,
            log_var,
            shape: shape.to_vec(),
        })
    }

    pub fn vector(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        let n = mean.len();
        Self::new(mean, log_var, &[n])
    }

    pub fn standard(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            mean: vec![0.0; n],
            log_var: vec![0.0; n],
            shape: shape.to_vec(),
        }
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn log_var(&self) -> &[f64] {
        &self.log_var
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }
}

/// Reparameterized draw `mean + exp(log_var / 2) * noise`.
pub fn rsample(dist: &DiagGaussian, noise: &[f64]) -> Result<Vec<f64>> {
    contract!(noise.len() == dist.len(), "rsample: noise length {} vs {}", noise.len(), dist.len());
    Ok(dist
        .mean
        .iter()
        .zip(&dist.log_var)
        .zip(noise)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect())
}

/// Per-coordinate `KL(N(mq, e^lq) || N(mp, e^lp))`.
pub fn kl_term(mq: f64, lq: f64, mp: f64, lp: f64) -> f64 {
    let d = mq - mp;
    0.5 * ((lq - lp).exp() + d * d * (-lp).exp() - 1.0 + lp - lq)
}

pub fn kl_diag_gaussian(q: &DiagGaussian, p: &DiagGaussian) -> Result<f64> {
    contract!(q.len() == p.len(), "kl_diag_gaussian: sizes {} vs {}", q.len(), p.len());
    Ok((0..q.len()).map(|i| kl_term(q.mean[i], q.log_var[i], p.mean[i], p.log_var[i])).sum())
}

pub fn gaussian_log_prob(dist: &DiagGaussian, x: &[f64]) -> Result<f64> {
    contract!(x.len() == dist.len(), "gaussian_log_prob: x length {} vs {}", x.len(), dist.len());
    Ok(x
        .iter()
        .zip(&dist.mean)
        .zip(&dist.log_var)
        .map(|((x, m), lv)| -0.5 * ((2.0 * PI).ln() + lv + (x - m).powi(2) * (-lv).exp()))
        .sum())
}

/// Bernoulli likelihood over an image, parameterized by logits.
#[derive(Debug, Clone, PartialEq)]
pub struct BernoulliImage {
    logits: Vec<f64>,
    height: usize,
    width: usize,
}

impl BernoulliImage {
    pub fn new(logits: Vec<f64>, height: usize, width: usize) -> Result<Self> {
        contract!(logits.len() == height * width, "BernoulliImage: {} logits for {height}x{width}", logits.len());
        contract!(logits.iter().all(|l| l.is_finite()), "BernoulliImage: non-finite logit");
        Ok(Self { logits, height, width })
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.logits.iter().map(|&l| crate::tape::kernels::sigmoid(l)).collect()
    }
}

pub fn bernoulli_log_prob(dist: &BernoulliImage, x: &[f64]) -> Result<f64> {
    contract!(x.len() == dist.logits.len(), "bernoulli_log_prob: {} pixels vs {}", x.len(), dist.logits.len());
    contract!(x.iter().all(|&v| v == 0.0 || v == 1.0), "bernoulli_log_prob: observation is not binary");
    Ok(x.iter().zip(&dist.logits).map(|(x, l)| bernoulli_term(*x, *l)).sum())
}

/// `x ln σ(l) + (1 - x) ln(1 - σ(l))` without cancellation at large `|l|`.
pub fn bernoulli_term(x: f64, logit: f64) -> f64 {
    -(x * softplus(-logit) + (1.0 - x) * softplus(logit))
}

/// A diagonal Gaussian living on a tape; `log_var` is already clamped.
#[derive(Debug, Clone, Copy)]
pub struct GaussianNode {
    pub mean: Var,
    pub log_var: Var,
}

impl GaussianNode {
    /// Wraps raw head outputs, clamping the log-variance.
    pub fn from_heads(tape: &mut Tape, mean: Var, raw_log_var: Var) -> Self {
        let log_var = tape.clamp(raw_log_var, LOG_VAR_MIN, LOG_VAR_MAX);
        Self { mean, log_var }
    }

    pub fn standard(tape: &mut Tape, shape: &[usize]) -> Self {
        let mean = tape.zeros(shape);
        let log_var = tape.zeros(shape);
        Self { mean, log_var }
    }

    pub fn rsample(&self, tape: &mut Tape, noise: Vec<f64>) -> Var {
        let shape = tape.shape(self.mean).to_vec();
        let eps = tape.leaf(noise, &shape);
        let half = tape.scale(self.log_var, 0.5);
        let std = tape.exp(half);
        let scaled = tape.mul(std, eps);
        tape.add(self.mean, scaled)
    }

    /// Row-wise KL to `prior`: `[N, ...] -> [N]`.
    pub fn kl(&self, tape: &mut Tape, prior: &GaussianNode) -> Var {
        tape.kl_diag(self.mean, self.log_var, prior.mean, prior.log_var)
    }

    /// Row-wise log density of a sample, computed from node values.
    pub fn log_prob_rows(&self, tape: &Tape, sample: Var) -> Vec<f64> {
        let (m, lv, x) = (tape.value(self.mean), tape.value(self.log_var), tape.value(sample));
        let rows = tape.shape(self.mean)[0];
        let cols = m.len() / rows.max(1);
        (0..rows)
            .map(|r| {
                (r * cols..(r + 1) * cols)
                    .map(|i| -0.5 * ((2.0 * PI).ln() + lv[i] + (x[i] - m[i]).powi(2) * (-lv[i]).exp()))
                    .sum()
            })
            .collect()
    }

    /// Extracts row `row` as a value-level distribution with per-row `shape`.
    pub fn row(&self, tape: &Tape, row: usize) -> DiagGaussian {
        let shape = tape.shape(self.mean);
        let cols: usize = shape[1..].iter().product();
        let span = row * cols..(row + 1) * cols;
        DiagGaussian {
            mean: tape.value(self.mean)[span.clone()].to_vec(),
            log_var: tape.value(self.log_var)[span].to_vec(),
            shape: shape[1..].to_vec(),
        }
    }
}
