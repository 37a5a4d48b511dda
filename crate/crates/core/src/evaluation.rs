//! Importance-weighted likelihood, KL reports, cardinality sweeps and the
//! adaptation-free few-shot classifiers.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::Binarization;
use crate::distributions::{kl_diag_gaussian, GaussianNode};
use crate::episodes::{binarize, sample_episode, ClassIndexedDataset, ClassSplits, SetBatch, Split};
use crate::error::{Error, Result};
use crate::model::{LatentState, Model, RunInput, Slot, Source};
use crate::objective::{self, batch_loss, ElboTerms};
use crate::params::Graph;
use crate::rng::{seeded, LatentKind, NoiseSite, NoiseSource, SeededRng, StreamNoise};
use crate::tape::Var;

/// `log((1/n) sum exp(v))`, stable for any common offset.
pub fn log_mean_exp(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NEG_INFINITY;
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + (sum / values.len() as f64).ln()
}

/// Scores a query observation against a conditioning set.
pub trait FewShotScorer {
    type Obs: Clone;

    /// Lower bound on `log p(set)`.
    fn elbo(&self, set: &[Self::Obs], rng: &mut SeededRng) -> Result<f64>;

    /// Monte Carlo estimate of `E log p(x | c, z)` with latents drawn conditionally on `set`.
    fn predictive_log_lik(&self, x: &Self::Obs, set: &[Self::Obs], draws: usize, rng: &mut SeededRng) -> Result<f64>;

    /// `KL(q(c | set) || q(c | x))`.
    fn context_kl(&self, x: &Self::Obs, set: &[Self::Obs], rng: &mut SeededRng) -> Result<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifyMethod {
    /// `ELBO([X_y, x]) - ELBO(X_y)`.
    ElboDiff,
    /// Conditional log-likelihood of `x` under latents inferred from `X_y`.
    Predictive,
    /// Divergence between the set and singleton context posteriors.
    Kl,
}

impl std::str::FromStr for ClassifyMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "elbo_diff" | "elbo" => Ok(Self::ElboDiff),
            "predictive" => Ok(Self::Predictive),
            "kl" => Ok(Self::Kl),
            other => Err(Error::Config(format!("unknown classification method '{other}' (expected elbo_diff, predictive or kl)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifyOptions {
    pub method: ClassifyMethod,
    /// Monte Carlo draws for the predictive method.
    pub draws: usize,
    /// Pick the smallest KL instead of the largest (KL method only).
    pub argmin: bool,
}

impl Default for ClassifyOptions {
    fn default() -> Self {
        Self {
            method: ClassifyMethod::ElboDiff,
            draws: 100,
            argmin: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub predicted: usize,
    pub scores: Vec<f64>,
}

/// Scores `x` against every class set and picks the best. Every class is scored
/// with an rng seeded identically from `seed`, so identical sets give identical
/// scores; ties go to the lowest class index.
pub fn classify<M: FewShotScorer>(model: &M, x: &M::Obs, class_sets: &[Vec<M::Obs>], opts: ClassifyOptions, seed: u64) -> Result<Classification> {
    if class_sets.len() < 2 {
        return Err(Error::Data(format!("classification needs at least 2 classes, got {}", class_sets.len())));
    }
    if let Some(i) = class_sets.iter().position(|s| s.is_empty()) {
        return Err(Error::Data(format!("class set {i} is empty")));
    }
    let mut scores = Vec::with_capacity(class_sets.len());
    for set in class_sets {
        let mut rng = seeded(seed);
        let score = match opts.method {
            ClassifyMethod::ElboDiff => {
                let mut augmented = set.clone();
                augmented.push(x.clone());
                let joint = model.elbo(&augmented, &mut rng)?;
                let mut rng = seeded(seed);
                joint - model.elbo(set, &mut rng)?
            }
            ClassifyMethod::Predictive => model.predictive_log_lik(x, set, opts.draws, &mut rng)?,
            ClassifyMethod::Kl => model.context_kl(x, set, &mut rng)?,
        };
        scores.push(score);
    }
    let minimize = opts.method == ClassifyMethod::Kl && opts.argmin;
    let mut predicted = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        let better = if minimize { s < scores[predicted] } else { s > scores[predicted] };
        if better {
            predicted = i;
        }
    }
    Ok(Classification { predicted, scores })
}

/// Replicas of one set scored per graph when drawing importance samples.
const IW_CHUNK: usize = 64;

fn repeat_rows(g: &mut Graph, features: Var, copies: usize, rows: usize) -> Var {
    let idx: Vec<usize> = (0..copies).flat_map(|_| 0..rows).collect();
    g.tape.gather(features, &idx)
}

fn per_set_sums(rows: &[f64], sets: usize) -> Vec<f64> {
    let s = rows.len() / sets;
    rows.chunks(s).map(|c| c.iter().sum()).collect()
}

/// `log p(X, c, Z) - log q(c, Z | X)` for each set of a posterior pass.
fn state_log_weights(g: &Graph, state: &LatentState, rec: Var) -> Result<Vec<f64>> {
    let mut w: Vec<f64> = g.tape.value(rec).to_vec();
    let mut add = |slot: &Slot, what: &str| -> Result<()> {
        let q = slot.posterior.ok_or_else(|| Error::Contract(format!("{what} was not drawn from the posterior")))?;
        let lp = per_set_sums(&slot.prior.log_prob_rows(&g.tape, slot.sample), state.sets);
        let lq = per_set_sums(&q.log_prob_rows(&g.tape, slot.sample), state.sets);
        for t in 0..state.sets {
            w[t] += lp[t] - lq[t];
        }
        Ok(())
    };
    for (l, slot) in state.z.iter().enumerate() {
        add(slot, &format!("z layer {}", l + 1))?;
    }
    for (l, slot) in state.context_slots() {
        add(slot, &format!("c layer {l}"))?;
    }
    Ok(w)
}

/// `n` importance log weights of one set under its amortized posterior.
pub fn log_weights(model: &Model, set: &[Vec<f64>], n: usize, rng: &mut SeededRng) -> Result<Vec<f64>> {
    if set.is_empty() {
        return Err(Error::Contract("importance weights of an empty set".into()));
    }
    if n == 0 {
        return Err(Error::Contract("at least one importance sample is required".into()));
    }
    let s = set.len();
    let targets = set.concat();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let k = IW_CHUNK.min(n - out.len());
        let mut g = model.graph(false);
        let x = model.images(&mut g, set)?;
        let trunk = model.encode_trunk(&mut g, x);
        let features = repeat_rows(&mut g, trunk, k, s);
        let input = RunInput {
            sets: k,
            set_size: s,
            features: Some(features),
            top_context: None,
            source: Source::Posterior,
        };
        let state = model.run(&mut g, input, &mut StreamNoise::new(rng))?;
        let logits = model.decode_state(&mut g, &state)?;
        let rows = g.tape.bernoulli_log_prob(logits, targets.repeat(k));
        let col = g.tape.reshape(rows, &[k * s, 1]);
        let rec = g.tape.group_sum(col, s);
        out.extend(state_log_weights(&g, &state, rec)?);
    }
    Ok(out)
}

/// Importance-weighted estimate of `log p(X)`, per sample.
pub fn mll_importance(model: &Model, set: &[Vec<f64>], samples: usize, rng: &mut SeededRng) -> Result<f64> {
    let w = log_weights(model, set, samples, rng)?;
    Ok(log_mean_exp(&w) / set.len() as f64)
}

/// Average KL per latent over episodes, per sample; context entries follow `ElboTerms::kl_c_by_layer`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlReport {
    pub kl_z: Vec<f64>,
    pub kl_c: Vec<f64>,
}

/// One row of a metrics CSV. Every bound term is per sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: Option<usize>,
    pub split: String,
    pub set_size: usize,
    pub nelbo: f64,
    pub rec: f64,
    pub kl_z: Vec<f64>,
    pub kl_c: Vec<f64>,
    /// Importance-weighted negative log-likelihood per sample.
    pub nll: Option<f64>,
    pub importance_samples: usize,
    pub seconds: f64,
}

pub fn csv_header(layers: usize) -> String {
    let mut cols = vec!["epoch".to_string(), "split".into(), "set_size".into(), "nelbo".into(), "rec".into()];
    cols.extend((1..=layers).map(|l| format!("klz_{l}")));
    cols.extend((1..=layers).map(|l| format!("klc_{l}")));
    cols.extend(["mll".to_string(), "is".into(), "seconds".into()]);
    cols.join(",")
}

impl MetricsRow {
    /// Per-sample view of mean set terms.
    pub fn from_terms(terms: &ElboTerms, layers: usize, split: &str, epoch: Option<usize>) -> Self {
        let s = terms.set_size as f64;
        Self {
            epoch,
            split: split.to_string(),
            set_size: terms.set_size,
            nelbo: terms.nelbo_per_sample(),
            rec: terms.rec / s,
            kl_z: terms.kl_z.iter().map(|k| k / s).collect(),
            kl_c: terms.kl_c_by_layer(layers).iter().map(|k| k / s).collect(),
            nll: None,
            importance_samples: 0,
            seconds: 0.0,
        }
    }

    pub fn csv_line(&self) -> String {
        let mut cols = vec![
            self.epoch.map_or(String::new(), |e| e.to_string()),
            self.split.clone(),
            self.set_size.to_string(),
            self.nelbo.to_string(),
            self.rec.to_string(),
        ];
        cols.extend(self.kl_z.iter().chain(&self.kl_c).map(f64::to_string));
        cols.push(self.nll.map_or(String::new(), |v| v.to_string()));
        cols.push(self.importance_samples.to_string());
        cols.push(format!("{:.3}", self.seconds));
        cols.join(",")
    }
}

/// Episodes drawn once so that several evaluations see identical sets.
pub fn draw_episodes(dataset: &ClassIndexedDataset, splits: &ClassSplits, split: Split, set_size: usize, count: usize, mode: Binarization, rng: &mut SeededRng) -> Result<Vec<SetBatch>> {
    (0..count).map(|_| sample_episode(dataset, splits, split, set_size, mode, rng)).collect()
}

/// Mean bound terms over episodes (eval mode) and, when `importance_samples > 0`,
/// the importance-weighted likelihood.
pub fn evaluate_episodes(model: &Model, episodes: &[SetBatch], importance_samples: usize, split: &str, rng: &mut SeededRng) -> Result<MetricsRow> {
    let start = std::time::Instant::now();
    let mut terms = Vec::with_capacity(episodes.len());
    for chunk in episodes.chunks(IW_CHUNK) {
        terms.extend(batch_loss(model, chunk, 0.0, false, &mut StreamNoise::new(rng))?.terms);
    }
    let mean = ElboTerms::mean(&terms)?;
    let mut row = MetricsRow::from_terms(&mean, model.config.layers, split, None);
    if importance_samples > 0 {
        let mut total = 0.0;
        for ep in episodes {
            total += mll_importance(model, &ep.observations, importance_samples, rng)?;
        }
        row.nll = Some(-total / episodes.len() as f64);
        row.importance_samples = importance_samples;
    }
    row.seconds = start.elapsed().as_secs_f64();
    Ok(row)
}

/// Mean per-sample KL for every latent.
pub fn kl_report(model: &Model, episodes: &[SetBatch], rng: &mut SeededRng) -> Result<KlReport> {
    let row = evaluate_episodes(model, episodes, 0, "", rng)?;
    Ok(KlReport { kl_z: row.kl_z, kl_c: row.kl_c })
}

/// Evaluates the test bound at every set size in `sizes`.
pub fn cardinality_sweep(
    model: &Model,
    dataset: &ClassIndexedDataset,
    splits: &ClassSplits,
    split: Split,
    sizes: &[usize],
    episodes: usize,
    importance_samples: usize,
    rng: &mut SeededRng,
) -> Result<Vec<MetricsRow>> {
    sizes
        .iter()
        .map(|&s| {
            let eps = draw_episodes(dataset, splits, split, s, episodes, Binarization::Static, rng)?;
            evaluate_episodes(model, &eps, importance_samples, split.name(), rng)
        })
        .collect()
}

/// Adapts an image model to the few-shot classifiers.
pub struct ImageScorer<'a> {
    pub model: &'a Model,
}

impl ImageScorer<'_> {
    fn top_posterior(&self, g: &mut Graph, set: &[Vec<f64>]) -> Result<GaussianNode> {
        if !self.model.config.context {
            return Err(Error::Variant("model has no context latent".into()));
        }
        let x = self.model.images(g, set)?;
        let h = self.model.encode_trunk(g, x);
        self.model.posterior_c_top(g, h, set.len())
    }
}

impl FewShotScorer for ImageScorer<'_> {
    type Obs = Vec<f64>;

    fn elbo(&self, set: &[Vec<f64>], rng: &mut SeededRng) -> Result<f64> {
        Ok(objective::elbo(self.model, set, &mut StreamNoise::new(rng))?.elbo())
    }

    fn predictive_log_lik(&self, x: &Vec<f64>, set: &[Vec<f64>], draws: usize, rng: &mut SeededRng) -> Result<f64> {
        if set.is_empty() || draws == 0 {
            return Err(Error::Contract("predictive score needs a nonempty set and at least one draw".into()));
        }
        let model = self.model;
        let mut g = model.graph(false);
        let top_context = if model.config.context {
            let q = self.top_posterior(&mut g, set)?;
            let rows = vec![0; draws];
            let tiled = GaussianNode {
                mean: g.tape.gather(q.mean, &rows),
                log_var: g.tape.gather(q.log_var, &rows),
            };
            let width = g.tape.value(q.mean).len();
            let eps = StreamNoise::new(rng).draw(NoiseSite {
                kind: LatentKind::Context,
                layer: model.config.layers,
                rows: draws,
                width,
            });
            Some(tiled.rsample(&mut g.tape, eps))
        } else {
            None
        };
        let input = RunInput {
            sets: draws,
            set_size: 1,
            features: None,
            top_context,
            source: Source::Prior,
        };
        let state = model.run(&mut g, input, &mut StreamNoise::new(rng))?;
        let logits = model.decode_state(&mut g, &state)?;
        let ll = g.tape.bernoulli_log_prob(logits, x.repeat(draws));
        let v = g.tape.value(ll);
        Ok(v.iter().sum::<f64>() / draws as f64)
    }

    fn context_kl(&self, x: &Vec<f64>, set: &[Vec<f64>], _rng: &mut SeededRng) -> Result<f64> {
        let mut g = self.model.graph(false);
        let q_set = self.top_posterior(&mut g, set)?.row(&g.tape, 0);
        let q_x = self.top_posterior(&mut g, std::slice::from_ref(x))?.row(&g.tape, 0);
        kl_diag_gaussian(&q_set, &q_x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyReport {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

/// `ways`-way `shots`-shot classification episodes over `split`, with `queries`
/// held-out queries per class.
#[allow(clippy::too_many_arguments)]
pub fn classify_episode(
    model: &Model,
    dataset: &ClassIndexedDataset,
    splits: &ClassSplits,
    split: Split,
    ways: usize,
    shots: usize,
    queries: usize,
    opts: ClassifyOptions,
    rng: &mut SeededRng,
) -> Result<ClassifyReport> {
    let ids = splits.get(split);
    if ways < 2 || ids.len() < ways {
        return Err(Error::Data(format!("{ways}-way classification needs at least 2 ways and {ways} classes in '{split}', found {}", ids.len())));
    }
    if shots == 0 || queries == 0 {
        return Err(Error::Config("classification needs at least one shot and one query".into()));
    }
    let chosen: Vec<&String> = ids.choose_multiple(rng, ways).collect();
    let mut support = Vec::with_capacity(ways);
    let mut held_out = Vec::with_capacity(ways);
    for id in &chosen {
        let class = dataset.class(id).ok_or_else(|| Error::Data(format!("split references unknown class '{id}'")))?;
        let n = class.images.len();
        if n < shots + queries {
            return Err(Error::Data(format!("class '{id}' has {n} images, need {}", shots + queries)));
        }
        let picks = rand::seq::index::sample(rng, n, shots + queries).into_vec();
        let mut bin = |i: usize| binarize(&class.images[i], dataset.width(), Binarization::Static, rng);
        support.push(picks[..shots].iter().map(|&i| bin(i)).collect::<Result<Vec<_>>>()?);
        held_out.push(picks[shots..].iter().map(|&i| bin(i)).collect::<Result<Vec<_>>>()?);
    }
    let scorer = ImageScorer { model };
    let mut confusion = vec![vec![0; ways]; ways];
    for (truth, qs) in held_out.iter().enumerate() {
        for q in qs {
            let seed = rng.random();
            let c = classify(&scorer, q, &support, opts, seed)?;
            confusion[truth][c.predicted] += 1;
        }
    }
    let correct: usize = (0..ways).map(|i| confusion[i][i]).sum();
    let total = ways * queries;
    Ok(ClassifyReport {
        accuracy: correct as f64 / total as f64,
        correct,
        total,
        confusion,
    })
}
