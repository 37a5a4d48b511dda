//! Linear-Gaussian set model with closed-form marginals, posteriors and predictives.
//!
//! Generative process for a set of `S` scalar observations:
//!
//! ```text
//! c   ~ N(0, var_c)
//! z_s ~ N(0, var_z)             s = 1..S
//! x_s ~ N(c + z_s, var_x)
//! ```
//!
//! so `X ~ N(0, (var_z + var_x) I + var_c J)` with `J` the all-ones matrix. The
//! latent ordering used throughout is `[c, z_1, ..., z_S]`.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::distributions::{kl_diag_gaussian, DiagGaussian};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::rng::SeededRng;
use crate::tape::Tape;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGaussianInstance {
    pub var_c: f64,
    pub var_z: f64,
    pub var_x: f64,
    pub observations: Vec<f64>,
}

impl LinearGaussianInstance {
    pub fn new(var_c: f64, var_z: f64, var_x: f64, observations: Vec<f64>) -> Result<Self> {
        for (name, v) in [("var_c", var_c), ("var_z", var_z), ("var_x", var_x)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive and finite, got {v}")));
            }
        }
        Ok(Self {
            var_c,
            var_z,
            var_x,
            observations,
        })
    }

    /// Draws variances in `[0.5, 2]` and a set of size `set_size` from the model.
    pub fn random(rng: &mut SeededRng, set_size: usize) -> Self {
        let var_c = rng.random_range(0.5..2.0);
        let var_z = rng.random_range(0.5..2.0);
        let var_x = rng.random_range(0.5..2.0);
        let model = OracleModel { var_c, var_z, var_x };
        let observations = model.sample_set(set_size, rng);
        Self {
            var_c,
            var_z,
            var_x,
            observations,
        }
    }

    pub fn set_size(&self) -> usize {
        self.observations.len()
    }

    pub fn model(&self) -> OracleModel {
        OracleModel {
            var_c: self.var_c,
            var_z: self.var_z,
            var_x: self.var_x,
        }
    }


    /// `log p(X, c, z)`.
    pub fn log_joint(&self, c: f64, z: &[f64]) -> f64 {
        let mut lp = normal_log_density(c, 0.0, self.var_c);
        for (x, zs) in self.observations.iter().zip(z) {
            lp += normal_log_density(*zs, 0.0, self.var_z) + normal_log_density(*x, c + zs, self.var_x);
        }
        lp
    }
}

pub fn normal_log_density(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * PI * var).ln() + (x - mean).powi(2) / var)
}

/// `log N(X; 0, a I + b J)` with `a = var_z + var_x`, `b = var_c`, using
/// `det = a^(S-1) (a + S b)` and the Sherman-Morrison inverse.
pub fn exact_log_marginal(inst: &LinearGaussianInstance) -> f64 {
    let s = inst.set_size() as f64;
    if inst.observations.is_empty() {
        return 0.0;
    }
    let a = inst.var_z + inst.var_x;
    let b = inst.var_c;
    let sum: f64 = inst.observations.iter().sum();
    let sum_sq: f64 = inst.observations.iter().map(|x| x * x).sum();
    let log_det = (s - 1.0) * a.ln() + (a + s * b).ln();
    let quad = (sum_sq - b * sum * sum / (a + s * b)) / a;
    -0.5 * (s * (2.0 * PI).ln() + log_det + quad)
}

/// Dense Gaussian over `[c, z_1..z_S]`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointGaussian {
    pub mean: Vec<f64>,
    /// Row-major `dim x dim` covariance.
    pub cov: Vec<f64>,
    pub dim: usize,
}

impl JointGaussian {
    pub fn sample(&self, rng: &mut SeededRng) -> Vec<f64> {
        let l = cholesky(&self.cov, self.dim).expect("posterior covariance is positive definite");
        let eps: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
        (0..self.dim)
            .map(|i| self.mean[i] + (0..=i).map(|j| l[i * self.dim + j] * eps[j]).sum::<f64>())
            .collect()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let n = self.dim;
        let l = cholesky(&self.cov, n).expect("posterior covariance is positive definite");
        // forward substitution: l y = x - mean
        let mut y = vec![0.0; n];
        for i in 0..n {
            let acc: f64 = (0..i).map(|j| l[i * n + j] * y[j]).sum();
            y[i] = (x[i] - self.mean[i] - acc) / l[i * n + i];
        }
        let log_det: f64 = (0..n).map(|i| 2.0 * l[i * n + i].ln()).sum();
        -0.5 * (n as f64 * (2.0 * PI).ln() + log_det + y.iter().map(|v| v * v).sum::<f64>())
    }
}

/// Log importance weights with the exact joint posterior as proposal.
pub fn exact_joint_log_weights(inst: &LinearGaussianInstance, n: usize, rng: &mut SeededRng) -> Vec<f64> {
    let post = exact_posteriors(inst);
    (0..n)
        .map(|_| {
            let d = post.joint.sample(rng);
            inst.log_joint(d[0], &d[1..]) - post.joint.log_density(&d)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExactPosterior {
    pub joint: JointGaussian,
    /// Diagonal projection: matched means and the marginal variances (diagonal of
    /// the inverse precision).
    pub mean_field: DiagGaussian,
}

fn posterior_precision(inst: &LinearGaussianInstance) -> Vec<f64> {
    let s = inst.set_size();
    let n = s + 1;
    let mut p = vec![0.0; n * n];
    p[0] = 1.0 / inst.var_c + s as f64 / inst.var_x;
    for i in 1..n {
        p[i] = 1.0 / inst.var_x;
        p[i * n] = 1.0 / inst.var_x;
        p[i * n + i] = 1.0 / inst.var_z + 1.0 / inst.var_x;
    }
    p
}

pub fn exact_posteriors(inst: &LinearGaussianInstance) -> ExactPosterior {
    let n = inst.set_size() + 1;
    let precision = posterior_precision(inst);
    let cov = spd_inverse(&precision, n).expect("posterior precision is positive definite");
    let mut rhs = vec![0.0; n];
    rhs[0] = inst.observations.iter().sum::<f64>() / inst.var_x;
    for (i, x) in inst.observations.iter().enumerate() {
        rhs[i + 1] = x / inst.var_x;
    }
    let mean: Vec<f64> = (0..n).map(|i| (0..n).map(|j| cov[i * n + j] * rhs[j]).sum()).collect();
    let log_var: Vec<f64> = (0..n).map(|i| cov[i * n + i].ln()).collect();
    let mean_field = DiagGaussian::vector(mean.clone(), log_var).expect("matching lengths");
    ExactPosterior {
        joint: JointGaussian { mean, cov, dim: n },
        mean_field,
    }
}

/// The KL(q || p)-optimal fully factorized posterior: exact means, variances
/// `1 / precision_ii`.
pub fn optimal_mean_field(inst: &LinearGaussianInstance) -> DiagGaussian {
    let n = inst.set_size() + 1;
    let precision = posterior_precision(inst);
    let exact = exact_posteriors(inst);
    let log_var = (0..n).map(|i| -precision[i * n + i].ln()).collect();
    DiagGaussian::vector(exact.joint.mean, log_var).expect("matching lengths")
}

/// Exact `q(c | X)`.
pub fn context_posterior(inst: &LinearGaussianInstance) -> DiagGaussian {
    let a = inst.var_z + inst.var_x;
    let precision = 1.0 / inst.var_c + inst.set_size() as f64 / a;
    let mean = inst.observations.iter().sum::<f64>() / a / precision;
    DiagGaussian::vector(vec![mean], vec![-precision.ln()]).expect("scalar")
}

/// Exact `q(z_s | c, x_s)`.
pub fn sample_posterior_given_context(inst: &LinearGaussianInstance, c: f64, x: f64) -> DiagGaussian {
    let total = inst.var_z + inst.var_x;
    let mean = inst.var_z * (x - c) / total;
    let var = inst.var_z * inst.var_x / total;
    DiagGaussian::vector(vec![mean], vec![var.ln()]).expect("scalar")
}

/// Mean and variance of `p(x_new | X)`.
pub fn exact_predictive(inst: &LinearGaussianInstance) -> (f64, f64) {
    let post = context_posterior(inst);
    (post.mean()[0], post.log_var()[0].exp() + inst.var_z + inst.var_x)
}

/// Closed-form ELBO for a fully factorized Gaussian `q` over `[c, z_1..z_S]`.
pub fn mean_field_elbo(inst: &LinearGaussianInstance, q: &DiagGaussian) -> f64 {
    let m = q.mean();
    let v: Vec<f64> = q.log_var().iter().map(|lv| lv.exp()).collect();
    let mut elbo = -0.5 * ((2.0 * PI * inst.var_c).ln() + (m[0] * m[0] + v[0]) / inst.var_c);
    for (s, x) in inst.observations.iter().enumerate() {
        let (mz, vz) = (m[s + 1], v[s + 1]);
        elbo -= 0.5 * ((2.0 * PI * inst.var_z).ln() + (mz * mz + vz) / inst.var_z);
        elbo -= 0.5 * ((2.0 * PI * inst.var_x).ln() + ((x - m[0] - mz).powi(2) + v[0] + vz) / inst.var_x);
    }
    let entropy: f64 = q.log_var().iter().map(|lv| 0.5 * ((2.0 * PI).ln() + 1.0 + lv)).sum();
    elbo + entropy
}

/// Fits a fully factorized posterior by gradient ascent on the closed-form ELBO,
/// starting from the prior.
pub fn fit_mean_field(inst: &LinearGaussianInstance, steps: usize, lr: f64) -> DiagGaussian {
    let s = inst.set_size();
    let n = s + 1;
    let mut mean = vec![0.0; n];
    let mut log_var = vec![0.0; n];
    let mut opt = Adam::new(
        &[n, n],
        AdamConfig {
            lr,
            weight_decay: 0.0,
            ..AdamConfig::default()
        },
    );
    let c_rows = vec![0usize; s];
    let z_rows: Vec<usize> = (1..n).collect();
    let prior_var: Vec<f64> = std::iter::once(inst.var_c).chain(std::iter::repeat_n(inst.var_z, s)).collect();
    for _ in 0..steps {
        let mut t = Tape::new();
        let m = t.leaf(mean.clone(), &[n, 1]);
        let lv = t.leaf(log_var.clone(), &[n, 1]);
        let v = t.exp(lv);
        // prior terms: -(m^2 + v) / (2 var)
        let m2 = t.mul(m, m);
        let second = t.add(m2, v);
        let inv_prior = t.leaf(prior_var.iter().map(|p| -0.5 / p).collect(), &[n, 1]);
        let prior = t.mul(second, inv_prior);
        let prior = t.sum_all(prior);
        let mut total = prior;
        if s > 0 {
            let mc = t.gather(m, &c_rows);
            let mz = t.gather(m, &z_rows);
            let vc = t.gather(v, &c_rows);
            let vz = t.gather(v, &z_rows);
            let xs = t.leaf(inst.observations.clone(), &[s, 1]);
            let pred = t.add(mc, mz);
            let resid = t.sub(xs, pred);
            let r2 = t.mul(resid, resid);
            let spread = t.add(vc, vz);
            let lik = t.add(r2, spread);
            let lik = t.scale(lik, -0.5 / inst.var_x);
            let lik = t.sum_all(lik);
            total = t.add(total, lik);
        }
        let ent = t.sum_all(lv);
        let ent = t.scale(ent, 0.5);
        let total = t.add(total, ent);
        let loss = t.scale(total, -1.0);
        let grads = t.backward(loss);
        let (gm, glv) = (grads.get(m).map(<[f64]>::to_vec), grads.get(lv).map(<[f64]>::to_vec));
        opt.update(&mut [&mut mean[..], &mut log_var[..]], &[gm.as_deref(), glv.as_deref()]);
    }
    DiagGaussian::vector(mean, log_var).expect("matching lengths")
}

/// Log importance weights `log p(X, c, z) - log q(c, z)` for `n` draws from the
/// factorized proposal `q`.
pub fn importance_log_weights(inst: &LinearGaussianInstance, q: &DiagGaussian, n: usize, rng: &mut SeededRng) -> Vec<f64> {
    let dim = q.len();
    (0..n)
        .map(|_| {
            let mut log_q = 0.0;
            let draw: Vec<f64> = (0..dim)
                .map(|i| {
                    let (m, lv) = (q.mean()[i], q.log_var()[i]);
                    let v = m + (0.5 * lv).exp() * rng.sample::<f64, _>(StandardNormal);
                    log_q += normal_log_density(v, m, lv.exp());
                    v
                })
                .collect();
            inst.log_joint(draw[0], &draw[1..]) - log_q
        })
        .collect()
}

/// Monte Carlo estimate of the hierarchical bound
/// `E[sum_s log p(x_s | c, z_s)] - E_c[sum_s KL(q(z_s|c,x_s) || p(z_s))] - KL(q(c|X) || p(c))`
/// with the exact factors `q(c | X)` and `q(z_s | c, x_s)`. The KL terms are analytic;
/// only the expectations over `c` and `z` are sampled. Returns `(mean, std_error)`.
pub fn hierarchical_elbo_estimate(inst: &LinearGaussianInstance, draws: usize, rng: &mut SeededRng) -> (f64, f64) {
    let q_c = context_posterior(inst);
    let p_c = DiagGaussian::vector(vec![0.0], vec![inst.var_c.ln()]).expect("scalar");
    let p_z = DiagGaussian::vector(vec![0.0], vec![inst.var_z.ln()]).expect("scalar");
    let kl_c = kl_diag_gaussian(&q_c, &p_c).expect("scalar");
    let values: Vec<f64> = (0..draws)
        .map(|_| {
            let c = q_c.mean()[0] + (0.5 * q_c.log_var()[0]).exp() * rng.sample::<f64, _>(StandardNormal);
            let mut rec = 0.0;
            let mut kl_z = 0.0;
            for &x in &inst.observations {
                let q_z = sample_posterior_given_context(inst, c, x);
                kl_z += kl_diag_gaussian(&q_z, &p_z).expect("scalar");
                let z = q_z.mean()[0] + (0.5 * q_z.log_var()[0]).exp() * rng.sample::<f64, _>(StandardNormal);
                rec += normal_log_density(x, c + z, inst.var_x);
            }
            rec - kl_z - kl_c
        })
        .collect();
    mean_and_stderr(&values)
}

pub fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

/// Generative parameters of the oracle family, without observations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleModel {
    pub var_c: f64,
    pub var_z: f64,
    pub var_x: f64,
}

impl OracleModel {
    pub fn sample_set(&self, set_size: usize, rng: &mut SeededRng) -> Vec<f64> {
        let c = self.var_c.sqrt() * rng.sample::<f64, _>(StandardNormal);
        self.sample_given_context(c, set_size, rng)
    }

    pub fn sample_given_context(&self, c: f64, set_size: usize, rng: &mut SeededRng) -> Vec<f64> {
        (0..set_size)
            .map(|_| {
                let z = self.var_z.sqrt() * rng.sample::<f64, _>(StandardNormal);
                c + z + self.var_x.sqrt() * rng.sample::<f64, _>(StandardNormal)
            })
            .collect()
    }

    pub fn instance(&self, observations: Vec<f64>) -> LinearGaussianInstance {
        LinearGaussianInstance {
            var_c: self.var_c,
            var_z: self.var_z,
            var_x: self.var_x,
            observations,
        }
    }
}

impl crate::sampling::RefinableModel for OracleModel {
    type Obs = f64;
    type Draw = f64;

    /// Single pass: `c ~ p(c | X)`, then a fresh `z` and `x` from the prior hierarchy.
    fn conditional(&self, set: &[f64], rng: &mut SeededRng) -> Result<f64> {
        let q_c = context_posterior(&self.instance(set.to_vec()));
        let c = q_c.mean()[0] + (0.5 * q_c.log_var()[0]).exp() * rng.sample::<f64, _>(StandardNormal);
        Ok(self.sample_given_context(c, 1, rng)[0])
    }

    /// Draws `(c, Z~)` from the exact joint posterior of the augmented set and
    /// regenerates the appended slot from the likelihood.
    fn resample_last(&self, augmented: &[f64], rng: &mut SeededRng) -> Result<f64> {
        let post = exact_posteriors(&self.instance(augmented.to_vec()));
        let draw = post.joint.sample(rng);
        let c = draw[0];
        let z_last = draw[augmented.len()];
        Ok(c + z_last + self.var_x.sqrt() * rng.sample::<f64, _>(StandardNormal))
    }

    fn feed(&self, draw: &f64) -> f64 {
        *draw
    }
}

impl crate::evaluation::FewShotScorer for OracleModel {
    type Obs = f64;

    /// Exact posteriors make the bound tight: the ELBO equals `log p(X)`.
    fn elbo(&self, set: &[f64], _rng: &mut SeededRng) -> Result<f64> {
        Ok(exact_log_marginal(&self.instance(set.to_vec())))
    }

    fn predictive_log_lik(&self, x: &f64, set: &[f64], _draws: usize, _rng: &mut SeededRng) -> Result<f64> {
        let (mean, var) = exact_predictive(&self.instance(set.to_vec()));
        Ok(normal_log_density(*x, mean, var))
    }

    fn context_kl(&self, x: &f64, set: &[f64], _rng: &mut SeededRng) -> Result<f64> {
        let q_set = context_posterior(&self.instance(set.to_vec()));
        let q_single = context_posterior(&self.instance(vec![*x]));
        kl_diag_gaussian(&q_set, &q_single)
    }
}

/// Lower-triangular Cholesky factor of a row-major SPD matrix.
pub fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i * n + j];
            for k in 0..j {
                sum -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if sum <= 0.0 {
                    return None;
                }
                l[i * n + i] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    Some(l)
}

pub fn spd_inverse(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let l = cholesky(a, n)?;
    let mut inv = vec![0.0; n * n];
    for col in 0..n {
        // solve L y = e_col, then L^T x = y
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut sum = if i == col { 1.0 } else { 0.0 };
            for k in 0..i {
                sum -= l[i * n + k] * y[k];
            }
            y[i] = sum / l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut sum = y[i];
            for k in i + 1..n {
                sum -= l[k * n + i] * inv[k * n + col];
            }
            inv[i * n + col] = sum / l[i * n + i];
        }
    }
    Some(inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn unit(obs: Vec<f64>) -> LinearGaussianInstance {
        LinearGaussianInstance::new(1.0, 1.0, 1.0, obs).unwrap()
    }

    /// Trapezoid quadrature of the joint density over `(c, z_1)` on a +-8 sd grid;
    /// a second observation (if any) has its `z_2` integrated out analytically.
    fn quadrature_log_marginal(inst: &LinearGaussianInstance) -> f64 {
        assert!((1..=2).contains(&inst.set_size()));
        let n = 1200;
        let (sc, sz) = (inst.var_c.sqrt(), inst.var_z.sqrt());
        let (c_lo, c_hi) = (-8.0 * sc, 8.0 * sc);
        let x1 = inst.observations[0];
        let z_center = x1 / 2.0;
        let (z_lo, z_hi) = (z_center - 8.0 * sz.max(inst.var_x.sqrt()), z_center + 8.0 * sz.max(inst.var_x.sqrt()));
        let (hc, hz) = ((c_hi - c_lo) / n as f64, (z_hi - z_lo) / n as f64);
        let mut total = 0.0;
        for i in 0..=n {
            let c = c_lo + i as f64 * hc;
            let wc = if i == 0 || i == n { 0.5 } else { 1.0 };
            let mut inner = 0.0;
            for j in 0..=n {
                let z = z_lo + j as f64 * hz;
                let wz = if j == 0 || j == n { 0.5 } else { 1.0 };
                inner += wz * (normal_log_density(z, 0.0, inst.var_z) + normal_log_density(x1, c + z, inst.var_x)).exp();
            }
            let mut lp_c = normal_log_density(c, 0.0, inst.var_c);
            if let Some(&x2) = inst.observations.get(1) {
                lp_c += normal_log_density(x2, c, inst.var_z + inst.var_x);
            }
            total += wc * lp_c.exp() * inner * hz;
        }
        (total * hc).ln()
    }

    #[test]
    fn log_marginal_examples() {
        let v = exact_log_marginal(&unit(vec![0.0]));
        assert!((v + 0.5 * (6.0 * PI).ln()).abs() < 1e-12);
        let v = exact_log_marginal(&unit(vec![0.0, 0.0]));
        assert!((v - (-(2.0 * PI).ln() - 0.5 * 8f64.ln())).abs() < 1e-12);
        assert!((v + 2.87759).abs() < 1e-5);

        let tiny = LinearGaussianInstance::new(1e-12, 0.7, 0.4, vec![0.3, -1.1, 2.0]).unwrap();
        let independent: f64 = tiny.observations.iter().map(|&x| normal_log_density(x, 0.0, 1.1)).sum();
        assert!((exact_log_marginal(&tiny) - independent).abs() < 1e-9);
    }

    #[test]
    fn log_marginal_matches_quadrature() {
        let mut rng = seeded(11);
        for s in [1, 2] {
            for _ in 0..3 {
                let inst = LinearGaussianInstance::random(&mut rng, s);
                let q = quadrature_log_marginal(&inst);
                assert!((q - exact_log_marginal(&inst)).abs() < 1e-4, "S={s}: {q} vs {}", exact_log_marginal(&inst));
            }
        }
    }

    #[test]
    fn posterior_examples() {
        let post = exact_posteriors(&unit(vec![3.0]));
        assert!((post.joint.mean[0] - 1.0).abs() < 1e-12);
        assert!((context_posterior(&unit(vec![3.0])).mean()[0] - 1.0).abs() < 1e-12);

        let vague = LinearGaussianInstance::new(1.3, 0.8, 1e12, vec![5.0, -2.0]).unwrap();
        let post = exact_posteriors(&vague);
        assert!((post.joint.cov[0] - 1.3).abs() < 1e-9);
        assert!((post.joint.cov[4] - 0.8).abs() < 1e-9);
        assert!(post.joint.mean.iter().all(|m| m.abs() < 1e-9));

        let a = exact_posteriors(&unit(vec![1.0, 2.0]));
        let b = exact_posteriors(&unit(vec![-7.0, 0.5]));
        assert_eq!(a.joint.cov, b.joint.cov);
    }

    #[test]
    fn joint_and_factorized_posteriors_agree() {
        let inst = LinearGaussianInstance::new(1.7, 0.6, 0.9, vec![0.4, 1.9, -0.3]).unwrap();
        let joint = exact_posteriors(&inst);
        let qc = context_posterior(&inst);
        assert!((joint.joint.mean[0] - qc.mean()[0]).abs() < 1e-12);
        assert!((joint.joint.cov[0] - qc.log_var()[0].exp()).abs() < 1e-12);
    }

    #[test]
    fn predictive_examples() {
        let (m, v) = exact_predictive(&unit(vec![3.0]));
        assert!((m - 1.0).abs() < 1e-12);
        assert!((v - (1.0 + 1.0 + 2.0 / 3.0)).abs() < 1e-12);
        assert!((v - 2.6667).abs() < 1e-4);

        let (m, v) = exact_predictive(&unit(vec![]));
        assert_eq!(m, 0.0);
        assert!((v - 3.0).abs() < 1e-12);

        let big = unit(vec![1.5; 100_000]);
        assert!((exact_predictive(&big).0 - 1.5).abs() < 1e-4);
    }

    #[test]
    fn mean_field_elbo_bounds_marginal() {
        let mut rng = seeded(12);
        for _ in 0..50 {
            let s = rng.random_range(1..=5);
            let inst = LinearGaussianInstance::random(&mut rng, s);
            let exact = exact_log_marginal(&inst);
            for q in [exact_posteriors(&inst).mean_field, optimal_mean_field(&inst)] {
                assert!(mean_field_elbo(&inst, &q) <= exact + 1e-9);
            }
        }
    }

    #[test]
    fn fitted_mean_field_reaches_the_optimum() {
        let inst = LinearGaussianInstance::new(1.2, 0.7, 0.9, vec![1.0, 0.2, 1.6]).unwrap();
        let fitted = fit_mean_field(&inst, 3000, 0.02);
        let best = optimal_mean_field(&inst);
        for i in 0..4 {
            assert!((fitted.mean()[i] - best.mean()[i]).abs() < 1e-3);
            assert!((fitted.log_var()[i] - best.log_var()[i]).abs() < 1e-3);
        }
        assert!((mean_field_elbo(&inst, &fitted) - mean_field_elbo(&inst, &best)).abs() < 1e-6);
    }

    #[test]
    fn exact_hierarchical_posterior_closes_the_gap() {
        let inst = LinearGaussianInstance::new(1.5, 0.8, 0.6, vec![0.9, 2.1, 1.4]).unwrap();
        let mut rng = seeded(13);
        let (mean, se) = hierarchical_elbo_estimate(&inst, 10_000, &mut rng);
        let exact = exact_log_marginal(&inst);
        assert!((mean - exact).abs() <= 3.0 * se, "{mean} vs {exact} (se {se})");
    }

    #[test]
    fn importance_weights_are_constant_under_the_exact_joint() {
        // with q equal to the exact posterior the log ratio is log p(X) for every draw
        let inst = unit(vec![0.5, -0.25]);
        let exact = exact_log_marginal(&inst);
        for w in exact_joint_log_weights(&inst, 20, &mut seeded(14)) {
            assert!((w - exact).abs() < 1e-10);
        }
    }

    #[test]
    fn spd_inverse_roundtrip() {
        let a = [4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0];
        let inv = spd_inverse(&a, 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let v: f64 = (0..3).map(|k| a[i * 3 + k] * inv[k * 3 + j]).sum();
                assert!((v - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
        assert!(cholesky(&[1.0, 2.0, 2.0, 1.0], 2).is_none());
    }

    #[test]
    fn invalid_variances_are_rejected() {
        assert!(LinearGaussianInstance::new(0.0, 1.0, 1.0, vec![]).is_err());
        assert!(LinearGaussianInstance::new(1.0, -1.0, 1.0, vec![]).is_err());
    }
}
