//! Self-checks against closed-form ground truth: bound validity, importance
//! weighting, refinement stationarity, classification, set invariance and
//! gradients. `run_battery` is what `hfsgm oracle-check` executes.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use crate::aggregation::{lag_pool, max_pool, mean_pool, Aggregator, LagParams, SetEmbedding};
use crate::config::{ModelConfig, Variant};
use crate::episodes::{SetBatch, Split};
use crate::error::Result;
use crate::evaluation::{classify, log_mean_exp, ClassifyMethod, ClassifyOptions};
use crate::model::{InitScheme, Model};
use crate::objective::batch_loss;
use crate::oracle::{
    exact_joint_log_weights, exact_log_marginal, exact_predictive, fit_mean_field, importance_log_weights, mean_and_stderr, mean_field_elbo,
    normal_log_density, optimal_mean_field, LinearGaussianInstance, OracleModel,
};
use crate::rng::{mix64, seeded, KeyedNoise, SeededRng, StreamNoise};
use crate::sampling::{refine, RefinableModel};
use crate::tape::Tape;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

impl std::fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

/// Repetition counts for the statistical checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Profile {
    pub bound_instances: usize,
    pub iw_repetitions: usize,
    pub refine_chains: usize,
    pub refine_iters: usize,
    pub classify_trials: usize,
    pub permutations: usize,
}

impl Default for Profile {
    fn default() -> Self {
        Self {
            bound_instances: 100,
            iw_repetitions: 200,
            refine_chains: 10_000,
            refine_iters: 20,
            classify_trials: 10_000,
            permutations: 100,
        }
    }
}

impl Profile {
    /// Smaller counts; statistical bands widen accordingly.
    pub fn quick() -> Self {
        Self {
            bound_instances: 20,
            iw_repetitions: 40,
            refine_chains: 1000,
            refine_iters: 5,
            classify_trials: 1000,
            permutations: 10,
        }
    }

    pub fn scaled(self, factor: f64) -> Self {
        let s = |n: usize| ((n as f64 * factor).round() as usize).max(2);
        Self {
            bound_instances: s(self.bound_instances),
            iw_repetitions: s(self.iw_repetitions),
            refine_chains: s(self.refine_chains),
            refine_iters: self.refine_iters,
            classify_trials: s(self.classify_trials),
            permutations: s(self.permutations),
        }
    }
}

/// `log p(X)` by composite Simpson quadrature over `c`, with every `x_s | c`
/// independent `N(c, var_z + var_x)`.
pub fn quadrature_log_marginal(inst: &LinearGaussianInstance, intervals: usize) -> f64 {
    let n = intervals + intervals % 2;
    let sd = inst.var_c.sqrt();
    let (lo, hi) = (-12.0 * sd, 12.0 * sd);
    let h = (hi - lo) / n as f64;
    let a = inst.var_z + inst.var_x;
    let log_f = |c: f64| normal_log_density(c, 0.0, inst.var_c) + inst.observations.iter().map(|&x| normal_log_density(x, c, a)).sum::<f64>();
    let logs: Vec<f64> = (0..=n).map(|i| log_f(lo + i as f64 * h)).collect();
    let peak = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = logs
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
            w * (l - peak).exp()
        })
        .sum();
    peak + (total * h / 3.0).ln()
}

/// Mean-field ELBO never exceeds the exact log marginal, and the closed form
/// matches quadrature.
pub fn bound_suite(instances: usize, rng: &mut SeededRng) -> CheckOutcome {
    let mut worst_slack = f64::INFINITY;
    let mut worst_quad = 0.0f64;
    for i in 0..instances {
        let inst = LinearGaussianInstance::random(rng, 1 + i % 5);
        let exact = exact_log_marginal(&inst);
        worst_slack = worst_slack.min(exact - mean_field_elbo(&inst, &optimal_mean_field(&inst)));
        worst_quad = worst_quad.max((exact - quadrature_log_marginal(&inst, 4000)).abs());
    }
    CheckOutcome::new(
        "oracle bounds",
        worst_slack >= -1e-9 && worst_quad <= 1e-4,
        format!("{instances} instances; min(log p - ELBO) = {worst_slack:.3e}, max |closed form - quadrature| = {worst_quad:.3e}"),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IwStats {
    pub exact: f64,
    /// `(IS, mean estimate, standard deviation of one estimate)`, per sample.
    pub by_samples: Vec<(usize, f64, f64)>,
    /// `(mean, standard error)` of paired differences `IS=10 - IS=1` and `IS=100 - IS=10`.
    pub increments: Vec<(f64, f64)>,
}

impl IwStats {
    /// Distance of the IS=1000 mean from the exact value, in standard deviations of one estimate.
    pub fn sigmas_at_1000(&self) -> f64 {
        let &(_, m, sd) = self.by_samples.last().expect("four IS levels");
        (m - self.exact).abs() / sd
    }
}

/// Importance-weighted estimates with a learned diagonal proposal.
pub fn iw_convergence_stats(repetitions: usize, rng: &mut SeededRng) -> IwStats {
    let inst = LinearGaussianInstance::random(rng, 5);
    let q = fit_mean_field(&inst, 3000, 0.02);
    let s = inst.set_size() as f64;
    let mut est: [Vec<f64>; 4] = Default::default();
    for _ in 0..repetitions {
        for (k, n) in [1, 10, 100, 1000].into_iter().enumerate() {
            est[k].push(log_mean_exp(&importance_log_weights(&inst, &q, n, rng)) / s);
        }
    }
    let by_samples = [1, 10, 100, 1000]
        .iter()
        .zip(&est)
        .map(|(&n, v)| {
            let (m, se) = mean_and_stderr(v);
            (n, m, se * (v.len() as f64).sqrt())
        })
        .collect();
    let increments = (0..2)
        .map(|k| {
            let d: Vec<f64> = est[k + 1].iter().zip(&est[k]).map(|(a, b)| a - b).collect();
            mean_and_stderr(&d)
        })
        .collect();
    IwStats {
        exact: exact_log_marginal(&inst) / s,
        by_samples,
        increments,
    }
}

pub fn iw_convergence(repetitions: usize, rng: &mut SeededRng) -> CheckOutcome {
    let st = iw_convergence_stats(repetitions, rng);
    let ordered = st.increments.iter().all(|&(m, se)| m >= -2.0 * se);
    let z = st.sigmas_at_1000();
    let means: Vec<String> = st.by_samples.iter().map(|(n, m, _)| format!("IS={n}: {m:.5}")).collect();
    CheckOutcome::new(
        "importance weighting",
        ordered && z <= 3.0,
        format!("exact {:.5}; {}; IS=1000 mean off by {z:.2} sigma", st.exact, means.join(", ")),
    )
}

/// With the exact joint posterior as proposal every weight equals `log p(X)`.
pub fn iw_exact_proposal(rng: &mut SeededRng) -> CheckOutcome {
    let mut worst = 0.0f64;
    for s in 1..=5 {
        let inst = LinearGaussianInstance::random(rng, s);
        let exact = exact_log_marginal(&inst);
        for n in [1, 10, 100] {
            let w = exact_joint_log_weights(&inst, n, rng);
            worst = worst.max((log_mean_exp(&w) - exact).abs());
            worst = worst.max(w.iter().map(|v| (v - exact).abs()).fold(0.0, f64::max));
        }
    }
    CheckOutcome::new("exact proposal", worst < 1e-9, format!("max |estimate - log p(X)| = {worst:.3e}"))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RefineStats {
    pub exact_mean: f64,
    pub exact_var: f64,
    pub mean: f64,
    pub var: f64,
    /// Deviations in standard errors.
    pub mean_z: f64,
    pub var_z: f64,
}

/// Final states of independent refinement chains against the exact predictive.
pub fn refine_stats(chains: usize, iters: usize, rng: &mut SeededRng) -> Result<RefineStats> {
    let inst = LinearGaussianInstance::random(rng, 4);
    let model = inst.model();
    let mut finals = Vec::with_capacity(chains);
    for _ in 0..chains {
        let traj = refine(&model, &inst.observations, iters, rng)?;
        finals.push(*traj.last().expect("nonempty trajectory"));
    }
    let (exact_mean, exact_var) = exact_predictive(&inst);
    let n = chains as f64;
    let mean = finals.iter().sum::<f64>() / n;
    let var = finals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(RefineStats {
        exact_mean,
        exact_var,
        mean,
        var,
        mean_z: (mean - exact_mean) / (exact_var / n).sqrt(),
        var_z: (var - exact_var) / (exact_var * (2.0 / (n - 1.0)).sqrt()),
    })
}

pub fn refine_predictive(chains: usize, iters: usize, rng: &mut SeededRng) -> CheckOutcome {
    match refine_stats(chains, iters, rng) {
        Ok(st) => CheckOutcome::new(
            "refinement predictive",
            st.mean_z.abs() <= 3.0 && st.var_z.abs() <= 3.0,
            format!(
                "{chains} chains x {iters} iters: mean {:.4} vs {:.4} ({:+.2} se), var {:.4} vs {:.4} ({:+.2} se)",
                st.mean, st.exact_mean, st.mean_z, st.var, st.exact_var, st.var_z
            ),
        ),
        Err(e) => CheckOutcome::new("refinement predictive", false, e.to_string()),
    }
}

/// Zero refinement iterations reproduce the single conditional pass exactly.
pub fn refine_zero_iterations(rng: &mut SeededRng) -> CheckOutcome {
    let inst = LinearGaussianInstance::random(rng, 3);
    let model = inst.model();
    let seed: u64 = rng.random();
    let chain = refine(&model, &inst.observations, 0, &mut seeded(seed));
    let single = model.conditional(&inst.observations, &mut seeded(seed));
    let ok = matches!((&chain, &single), (Ok(c), Ok(s)) if c.len() == 1 && c[0].to_bits() == s.to_bits());
    CheckOutcome::new("refinement identity", ok, format!("chain {chain:?}, single pass {single:?}"))
}

/// Two well separated classes (`|mu_0 - mu_1| = 5 sigma`) scored by the ELBO
/// difference with exact posteriors.
pub fn classifier_accuracy(trials: usize, rng: &mut SeededRng) -> Result<f64> {
    let model = OracleModel {
        var_c: 100.0,
        var_z: 0.5,
        var_x: 0.5,
    };
    let means = [-2.5, 2.5];
    let opts = ClassifyOptions {
        method: ClassifyMethod::ElboDiff,
        ..ClassifyOptions::default()
    };
    let mut correct = 0;
    for t in 0..trials {
        let sets: Vec<Vec<f64>> = means.iter().map(|&m| model.sample_given_context(m, 50, rng)).collect();
        let truth = t % 2;
        let x = model.sample_given_context(means[truth], 1, rng)[0];
        if classify(&model, &x, &sets, opts, rng.random())?.predicted == truth {
            correct += 1;
        }
    }
    Ok(correct as f64 / trials as f64)
}

pub fn classifier_sanity(trials: usize, rng: &mut SeededRng) -> CheckOutcome {
    let acc = match classifier_accuracy(trials, rng) {
        Ok(a) => a,
        Err(e) => return CheckOutcome::new("classifier", false, e.to_string()),
    };
    let model = OracleModel {
        var_c: 2.0,
        var_z: 1.0,
        var_x: 0.5,
    };
    let set = model.sample_set(5, rng);
    let sets = vec![set.clone(), set.clone(), set];
    let mut ties = true;
    for method in [ClassifyMethod::ElboDiff, ClassifyMethod::Predictive, ClassifyMethod::Kl] {
        let opts = ClassifyOptions {
            method,
            ..ClassifyOptions::default()
        };
        match classify(&model, &0.3, &sets, opts, 7) {
            Ok(c) => ties &= c.predicted == 0 && c.scores.iter().all(|s| s.to_bits() == c.scores[0].to_bits()),
            Err(_) => ties = false,
        }
    }
    CheckOutcome::new(
        "classifier",
        acc >= 0.99 && ties,
        format!("separated 2-class accuracy {:.4} over {trials} queries; symmetric sets tie exactly: {ties}", acc),
    )
}

fn random_embedding(rng: &mut SeededRng, size: usize, dim: usize) -> SetEmbedding {
    SetEmbedding::new((0..size).map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect()).collect()).expect("rectangular")
}

/// Pooled outputs are bit-identical under permutation; attention weights follow
/// their elements and sum to one per head.
pub fn aggregator_invariance(permutations: usize, rng: &mut SeededRng) -> CheckOutcome {
    let mut exact = true;
    let mut worst_sum = 0.0f64;
    for s in 1..=10 {
        let e = random_embedding(rng, s, 6);
        let params = LagParams::random(rng, 6, 2);
        let base = (mean_pool(&e), max_pool(&e), lag_pool(&e, &params).expect("valid params"));
        for h in 0..2 {
            worst_sum = worst_sum.max((base.2.weights.iter().map(|w| w[h]).sum::<f64>() - 1.0).abs());
        }
        for _ in 0..permutations {
            let mut order: Vec<usize> = (0..s).collect();
            order.shuffle(rng);
            let p = SetEmbedding::new(order.iter().map(|&i| e.elements()[i].clone()).collect()).expect("rectangular");
            let lag = lag_pool(&p, &params).expect("valid params");
            exact &= mean_pool(&p) == base.0 && max_pool(&p) == base.1 && lag.output == base.2.output;
            exact &= order.iter().enumerate().all(|(pos, &src)| lag.weights[pos] == base.2.weights[src]);
        }
    }
    CheckOutcome::new(
        "aggregator invariance",
        exact && worst_sum <= 1e-12,
        format!("set sizes 1..10 x {permutations} permutations bit-identical: {exact}; max |sum of weights - 1| = {worst_sum:.2e}"),
    )
}

/// Small model used by the structural checks.
pub fn tiny_config(variant: Variant, aggregator: Aggregator) -> ModelConfig {
    ModelConfig {
        variant,
        aggregator,
        layers: 2,
        c_channels: 3,
        z_channels: 2,
        latent_resolution: 2,
        hidden_channels: 4,
        encoder_widths: vec![3, 4],
        image_size: 8,
        heads: 2,
        ..ModelConfig::default()
    }
}

fn random_images(rng: &mut SeededRng, n: usize, side: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..side * side).map(|_| rng.random_bool(0.3) as u8 as f64).collect()).collect()
}

/// Posterior pass over a permuted set: context latents bit-identical, per-sample
/// latents permuted with their observations. Returns the number of mismatches.
pub fn posterior_permutation_mismatches(model: &Model, set: &[Vec<f64>], permutations: usize, rng: &mut SeededRng) -> Result<usize> {
    let seed: u64 = rng.random();
    let run = |images: &[Vec<f64>]| -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let mut g = model.graph(false);
        let x = model.images(&mut g, images)?;
        let mut noise = KeyedNoise::from_images(seed, images, images.len());
        let state = model.infer(&mut g, x, 1, images.len(), &mut noise)?;
        let c = state
            .context_slots()
            .flat_map(|(_, s)| {
                let q = s.posterior.expect("posterior pass");
                [g.tape.value(q.mean).to_vec(), g.tape.value(q.log_var).to_vec(), g.tape.value(s.sample).to_vec()]
            })
            .collect();
        let z = state.z.iter().map(|s| g.tape.value(s.sample).to_vec()).collect();
        Ok((c, z))
    };
    let (c0, z0) = run(set)?;
    let n = set.len();
    let mut mismatches = 0;
    for _ in 0..permutations {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let permuted: Vec<Vec<f64>> = order.iter().map(|&i| set[i].clone()).collect();
        let (c, z) = run(&permuted)?;
        if c != c0 {
            mismatches += 1;
            continue;
        }
        for (layer, zl) in z.iter().enumerate() {
            let w = zl.len() / n;
            let same = order.iter().enumerate().all(|(pos, &src)| zl[pos * w..(pos + 1) * w] == z0[layer][src * w..(src + 1) * w]);
            if !same {
                mismatches += 1;
                break;
            }
        }
    }
    Ok(mismatches)
}

pub fn posterior_invariance(permutations: usize, rng: &mut SeededRng) -> CheckOutcome {
    let mut failures = Vec::new();
    for variant in [Variant::Ns, Variant::Hfsgm] {
        for agg in [Aggregator::Mean, Aggregator::Max, Aggregator::Lag] {
            let model = Model::with_init(tiny_config(variant, agg), InitScheme::Random { scale: 0.5 }).expect("valid config");
            for s in 1..=10 {
                let set = random_images(rng, s, 8);
                match posterior_permutation_mismatches(&model, &set, permutations, rng) {
                    Ok(0) => {}
                    Ok(m) => failures.push(format!("{variant:?}/{agg:?}/S={s}: {m} mismatches")),
                    Err(e) => failures.push(e.to_string()),
                }
            }
        }
    }
    CheckOutcome::new(
        "posterior invariance",
        failures.is_empty(),
        if failures.is_empty() {
            format!("NS and HFSGM x mean/max/LAG, {permutations} permutations each: exact")
        } else {
            failures.join("; ")
        },
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheck {
    pub checked: usize,
    /// Fraction of entries within `1e-3` relative error.
    pub within: f64,
    pub worst: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.within >= 0.95 && self.worst <= 1e-2
    }
}

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps entries whose true gradient
/// is zero from dominating.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic` with central differences of `f` around `x`.
pub fn gradient_check(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], analytic: &[f64], step: f64) -> GradCheck {
    let mut x = x.to_vec();
    let mut within = 0;
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let up = f(&x);
        x[i] = orig - step;
        let down = f(&x);
        x[i] = orig;
        let err = relative_error(analytic[i], (up - down) / (2.0 * step), 1e-6);
        if err <= 1e-3 {
            within += 1;
        }
        worst = worst.max(err);
    }
    GradCheck {
        checked: x.len(),
        within: within as f64 / x.len().max(1) as f64,
        worst,
    }
}

/// Gradient of a random scalar projection of the LAG output with respect to the
/// set elements and every projection weight.
pub fn lag_gradient(rng: &mut SeededRng) -> GradCheck {
    let (s, dim, heads) = (5, 4, 2);
    let e = random_embedding(rng, s, dim);
    let params = LagParams::random(rng, dim, heads);
    let proj: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut flat = e.flat();
    let mut sizes = vec![flat.len()];
    for l in [&params.query, &params.key, &params.value, &params.merge] {
        flat.extend(&l.weight);
        flat.extend(&l.bias);
        sizes.extend([l.weight.len(), l.bias.len()]);
    }
    let unpack = |v: &[f64]| -> (SetEmbedding, LagParams) {
        let mut off = 0;
        let mut take = |n: usize| {
            let out = v[off..off + n].to_vec();
            off += n;
            out
        };
        let elems = take(s * dim).chunks(dim).map(<[f64]>::to_vec).collect();
        let mut p = params.clone();
        for l in [&mut p.query, &mut p.key, &mut p.value, &mut p.merge] {
            l.weight = take(l.weight.len());
            l.bias = take(l.bias.len());
        }
        (SetEmbedding::new(elems).expect("rectangular"), p)
    };
    let value = |v: &[f64]| -> f64 {
        let (e, p) = unpack(v);
        let out = lag_pool(&e, &p).expect("valid params").output;
        out.iter().zip(&proj).map(|(a, b)| a * b).sum()
    };
    // analytic gradient through the tape
    let mut tape = Tape::new();
    let elems = tape.leaf(e.flat(), &[s, dim, 1, 1]);
    let bind = |tape: &mut Tape, l: &crate::aggregation::Linear| {
        (tape.leaf(l.weight.clone(), &[l.output, l.input, 1, 1]), tape.leaf(l.bias.clone(), &[l.output]))
    };
    let nodes = crate::aggregation::LagNodes {
        heads,
        query: bind(&mut tape, &params.query),
        key: bind(&mut tape, &params.key),
        value: bind(&mut tape, &params.value),
        merge: bind(&mut tape, &params.merge),
    };
    let att = crate::aggregation::lag_attend(&mut tape, elems, s, &nodes, Default::default());
    let w = tape.leaf(proj.clone(), &[1, dim, 1, 1]);
    let prod = tape.mul(att.output, w);
    let root = tape.sum_all(prod);
    let grads = tape.backward(root);
    let mut analytic = Vec::new();
    let get = |v| grads.get(v).map_or_else(Vec::new, <[f64]>::to_vec);
    analytic.extend(get(elems));
    for (wv, bv) in [nodes.query, nodes.key, nodes.value, nodes.merge] {
        analytic.extend(get(wv));
        analytic.extend(get(bv));
    }
    debug_assert_eq!(analytic.len(), sizes.iter().sum::<usize>());
    gradient_check(value, &flat, &analytic, 1e-5)
}

/// Configuration of the full-model gradient check: 4x4 images, two layers, LAG,
/// no batch norm.
pub fn gradient_config() -> ModelConfig {
    ModelConfig {
        variant: Variant::Hfsgm,
        aggregator: Aggregator::Lag,
        layers: 2,
        c_channels: 2,
        z_channels: 2,
        latent_resolution: 2,
        hidden_channels: 3,
        encoder_widths: vec![2],
        image_size: 4,
        heads: 1,
        batch_norm: false,
        ..ModelConfig::default()
    }
}

/// Gradient of the weighted training loss with respect to every trainable parameter.
pub fn model_gradient(config: ModelConfig, rng: &mut SeededRng) -> Result<GradCheck> {
    // larger scales push the loss past 1e9, where differences drown in round-off
    let model = Model::with_init(config.clone(), InitScheme::Random { scale: 0.3 })?;
    let side = config.image_size;
    let episodes: Vec<SetBatch> = (0..2)
        .map(|i| SetBatch {
            observations: random_images(rng, 3, side),
            class_id: format!("g{i}"),
            split: Split::Train,
        })
        .collect();
    let seed: u64 = rng.random();
    let alpha = 0.5;
    let out = batch_loss(&model, &episodes, alpha, true, &mut StreamNoise::new(&mut seeded(seed)))?;
    let names = model.params.trainable_names();
    let mut flat = Vec::new();
    let mut analytic = Vec::new();
    for n in &names {
        let t = model.params.get(n).expect("listed");
        flat.extend(&t.data);
        match out.gradients.get(n) {
            Some(g) => analytic.extend(g),
            None => analytic.extend(std::iter::repeat_n(0.0, t.data.len())),
        }
    }
    let mut probe = model.clone();
    let loss = |v: &[f64]| -> f64 {
        let mut off = 0;
        for n in &names {
            let t = probe.params.get_mut(n).expect("listed");
            let len = t.data.len();
            t.data.copy_from_slice(&v[off..off + len]);
            off += len;
        }
        batch_loss(&probe, &episodes, alpha, false, &mut StreamNoise::new(&mut seeded(seed)))
            .expect("same shapes as the analytic pass")
            .loss
    };
    Ok(gradient_check(loss, &flat, &analytic, 1e-5))
}

pub fn gradient_outcome(name: &str, r: Result<GradCheck>) -> CheckOutcome {
    match r {
        Ok(g) => CheckOutcome::new(
            name,
            g.passed(),
            format!("{} entries, {:.1}% within 1e-3 relative, worst {:.2e}", g.checked, 100.0 * g.within, g.worst),
        ),
        Err(e) => CheckOutcome::new(name, false, e.to_string()),
    }
}

/// Every check, each on its own rng stream derived from `seed`.
pub fn run_battery(profile: Profile, seed: u64) -> Vec<CheckOutcome> {
    let stream = |k: u64| seeded(mix64(seed ^ mix64(k)));
    vec![
        bound_suite(profile.bound_instances, &mut stream(1)),
        iw_convergence(profile.iw_repetitions, &mut stream(2)),
        iw_exact_proposal(&mut stream(3)),
        refine_zero_iterations(&mut stream(4)),
        refine_predictive(profile.refine_chains, profile.refine_iters, &mut stream(5)),
        classifier_sanity(profile.classify_trials, &mut stream(6)),
        aggregator_invariance(profile.permutations, &mut stream(7)),
        posterior_invariance(profile.permutations.min(20), &mut stream(8)),
        gradient_outcome("LAG gradient", Ok(lag_gradient(&mut stream(9)))),
        gradient_outcome("model gradient", model_gradient(gradient_config(), &mut stream(10))),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadrature_matches_closed_form() {
        let inst = LinearGaussianInstance::new(1.0, 1.0, 1.0, vec![0.0, 0.0]).unwrap();
        assert!((quadrature_log_marginal(&inst, 2000) - exact_log_marginal(&inst)).abs() < 1e-10);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0, 1e-6), 0.0);
        assert!((relative_error(1.0, 1.001, 1e-6) - 0.001 / 1.001).abs() < 1e-15);
        assert_eq!(relative_error(1e-9, 0.0, 1e-6), 1e-3);
    }

    #[test]
    fn quick_battery_passes() {
        for outcome in run_battery(Profile::quick(), 3) {
            assert!(outcome.passed, "{outcome}");
        }
    }
}
