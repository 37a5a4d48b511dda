//! Variational lower bounds, their per-term decomposition and the weighted
//! training loss.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::Variant;
use crate::episodes::SetBatch;
use crate::error::{Error, Result};
use crate::model::{LatentState, Model};
use crate::params::Graph;
use crate::rng::NoiseSource;
use crate::tape::Var;

/// Reconstruction and KL terms of one set, summed over its samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElboTerms {
    pub rec: f64,
    /// Indexed by `layer - 1`.
    pub kl_z: Vec<f64>,
    /// One entry per context latent: `L` for HFSGM, one (the top) otherwise.
    pub kl_c: Vec<f64>,
    pub set_size: usize,
}

impl ElboTerms {
    pub fn kl_total(&self) -> f64 {
        let mut total = 0.0;
        for k in self.kl_z.iter().chain(&self.kl_c) {
            total += k;
        }
        total
    }

    pub fn elbo(&self) -> f64 {
        self.rec - self.kl_total()
    }

    pub fn nelbo_per_sample(&self) -> f64 {
        -self.elbo() / self.set_size as f64
    }

    /// Term-wise mean over sets of equal size.
    pub fn mean(terms: &[ElboTerms]) -> Result<ElboTerms> {
        let first = terms.first().ok_or_else(|| Error::Contract("mean of no ElboTerms".into()))?;
        let n = terms.len() as f64;
        let avg = |f: &dyn Fn(&ElboTerms) -> f64| terms.iter().map(f).sum::<f64>() / n;
        Ok(ElboTerms {
            rec: avg(&|t| t.rec),
            kl_z: (0..first.kl_z.len()).map(|i| avg(&|t| t.kl_z[i])).collect(),
            kl_c: (0..first.kl_c.len()).map(|i| avg(&|t| t.kl_c[i])).collect(),
            set_size: first.set_size,
        })
    }

    /// KL(c) laid out over `layers` slots; a single context latent sits at the top slot.
    pub fn kl_c_by_layer(&self, layers: usize) -> Vec<f64> {
        if self.kl_c.len() == layers {
            return self.kl_c.clone();
        }
        let mut out = vec![0.0; layers];
        if let Some(&top) = self.kl_c.last() {
            out[layers - 1] = top;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnealState {
    pub alpha: f64,
    pub alpha_step: f64,
}

pub fn anneal(state: AnnealState) -> AnnealState {
    AnnealState {
        alpha: state.alpha * state.alpha_step,
        ..state
    }
}

/// `((1 + alpha) (-rec) + sum KL / (1 + alpha)) / S`.
pub fn weighted_loss(terms: &ElboTerms, alpha: f64) -> Result<f64> {
    if !(alpha >= 0.0) {
        return Err(Error::Contract(format!("alpha must be nonnegative, got {alpha}")));
    }
    Ok(((1.0 + alpha) * -terms.rec + terms.kl_total() / (1.0 + alpha)) / terms.set_size as f64)
}

/// Per-set bound terms on a tape, each `[T, 1]`.
pub struct ElboNodes {
    pub rec: Var,
    pub kl_z: Vec<Var>,
    pub kl_c: Vec<Option<Var>>,
    pub sets: usize,
    pub set_size: usize,
}

fn per_set(g: &mut Graph, rows: Var, set_size: usize) -> Var {
    let n = g.tape.shape(rows)[0];
    let col = g.tape.reshape(rows, &[n, 1]);
    g.tape.group_sum(col, set_size)
}

/// Reconstruction and analytic KL terms for a posterior pass.
pub fn elbo_nodes(model: &Model, g: &mut Graph, state: &LatentState, logits: Var, targets: Vec<f64>) -> Result<ElboNodes> {
    let s = state.set_size;
    let rec_rows = g.tape.bernoulli_log_prob(logits, targets);
    let rec = per_set(g, rec_rows, s);
    let mut kl_z = Vec::with_capacity(state.z.len());
    for (i, slot) in state.z.iter().enumerate() {
        let q = slot.posterior.ok_or_else(|| Error::Contract(format!("z layer {} was not drawn from the posterior", i + 1)))?;
        let rows = q.kl(&mut g.tape, &slot.prior);
        kl_z.push(per_set(g, rows, s));
    }
    let layers = model.config.layers;
    let slots: Vec<usize> = match model.config.variant {
        Variant::Hfsgm => (1..=layers).collect(),
        Variant::Ns | Variant::Bns => vec![layers],
    };
    let mut kl_c = Vec::with_capacity(slots.len());
    for l in slots {
        kl_c.push(match &state.c[l - 1] {
            Some(slot) => {
                let q = slot.posterior.ok_or_else(|| Error::Contract(format!("c layer {l} was not drawn from the posterior")))?;
                let rows = q.kl(&mut g.tape, &slot.prior);
                Some(g.tape.reshape(rows, &[state.sets, 1]))
            }
            None => None,
        });
    }
    Ok(ElboNodes {
        rec,
        kl_z,
        kl_c,
        sets: state.sets,
        set_size: s,
    })
}

impl ElboNodes {
    /// Value-level terms for every set.
    pub fn terms(&self, g: &Graph) -> Vec<ElboTerms> {
        (0..self.sets)
            .map(|t| ElboTerms {
                rec: g.tape.value(self.rec)[t],
                kl_z: self.kl_z.iter().map(|&v| g.tape.value(v)[t]).collect(),
                kl_c: self.kl_c.iter().map(|v| v.map_or(0.0, |v| g.tape.value(v)[t])).collect(),
                set_size: self.set_size,
            })
            .collect()
    }

    /// Weighted loss summed over sets and divided by `S * T`.
    pub fn loss(&self, g: &mut Graph, alpha: f64) -> Var {
        let mut kl: Option<Var> = None;
        for &v in self.kl_z.iter().chain(self.kl_c.iter().flatten()) {
            kl = Some(match kl {
                Some(acc) => g.tape.add(acc, v),
                None => v,
            });
        }
        let neg_rec = g.tape.scale(self.rec, -(1.0 + alpha));
        let per_set = match kl {
            Some(kl) => {
                let kl = g.tape.scale(kl, 1.0 / (1.0 + alpha));
                g.tape.add(neg_rec, kl)
            }
            None => neg_rec,
        };
        let total = g.tape.sum_all(per_set);
        g.tape.scale(total, 1.0 / (self.sets * self.set_size) as f64)
    }
}

/// Flattens the observations of equally sized episodes.
pub fn stack_episodes(episodes: &[SetBatch]) -> Result<(Vec<Vec<f64>>, usize)> {
    let first = episodes.first().ok_or_else(|| Error::Contract("empty batch".into()))?;
    let s = first.set_size();
    if s == 0 {
        return Err(Error::Contract("episode with no observations".into()));
    }
    if let Some(bad) = episodes.iter().find(|e| e.set_size() != s) {
        return Err(Error::Contract(format!("mixed set sizes in one batch: {s} and {}", bad.set_size())));
    }
    Ok((episodes.iter().flat_map(|e| e.observations.iter().cloned()).collect(), s))
}

#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub loss: f64,
    /// Per-episode terms, in batch order.
    pub terms: Vec<ElboTerms>,
    /// Parameter gradients; empty unless requested.
    pub gradients: BTreeMap<String, Vec<f64>>,
    /// Batch-norm statistics from a training-mode pass.
    pub running: Vec<(String, Vec<f64>, Vec<f64>)>,
}

/// Weighted loss of a batch of equally sized episodes, normalized per sample.
/// `training` selects batch statistics in batch norm and computes gradients.
pub fn batch_loss(model: &Model, episodes: &[SetBatch], alpha: f64, training: bool, noise: &mut dyn NoiseSource) -> Result<BatchLoss> {
    if !(alpha >= 0.0) {
        return Err(Error::Contract(format!("alpha must be nonnegative, got {alpha}")));
    }
    let (images, s) = stack_episodes(episodes)?;
    let mut g = model.graph(training);
    let x = model.images(&mut g, &images)?;
    let state = model.infer(&mut g, x, episodes.len(), s, noise)?;
    let logits = model.decode_state(&mut g, &state)?;
    let nodes = elbo_nodes(model, &mut g, &state, logits, images.concat())?;
    let loss = nodes.loss(&mut g, alpha);
    let terms = nodes.terms(&g);
    let (gradients, running) = if training {
        let grads = g.tape.backward(loss);
        (g.parameter_gradients(&grads), g.running_updates())
    } else {
        (BTreeMap::new(), Vec::new())
    };
    Ok(BatchLoss {
        loss: g.tape.scalar(loss),
        terms,
        gradients,
        running,
    })
}

/// Single-draw bound terms of one set, evaluated with running statistics.
pub fn elbo(model: &Model, set: &[Vec<f64>], noise: &mut dyn NoiseSource) -> Result<ElboTerms> {
    if set.is_empty() {
        return Err(Error::Contract("ELBO of an empty set".into()));
    }
    let mut g = model.graph(false);
    let x = model.images(&mut g, set)?;
    let state = model.infer(&mut g, x, 1, set.len(), noise)?;
    let logits = model.decode_state(&mut g, &state)?;
    let nodes = elbo_nodes(model, &mut g, &state, logits, set.concat())?;
    Ok(nodes.terms(&g).remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn terms(rec: f64, kl: f64) -> ElboTerms {
        ElboTerms {
            rec,
            kl_z: vec![kl],
            kl_c: vec![0.0],
            set_size: 1,
        }
    }

    #[test]
    fn weighted_loss_examples() {
        assert_eq!(weighted_loss(&terms(-10.0, 4.0), 1.0).unwrap(), 22.0);
        let t = ElboTerms {
            rec: -13.7,
            kl_z: vec![0.3, 1.9],
            kl_c: vec![2.2],
            set_size: 3,
        };
        assert_eq!(weighted_loss(&t, 0.0).unwrap(), -t.elbo() / 3.0);
        assert!(weighted_loss(&t, -0.5).is_err());
    }

    #[test]
    fn annealing() {
        let s = anneal(AnnealState { alpha: 2.0, alpha_step: 0.5 });
        assert_eq!(s.alpha, 1.0);
        assert_eq!(anneal(AnnealState { alpha: 0.0, alpha_step: 0.9 }).alpha, 0.0);
    }

    #[test]
    fn context_layout() {
        let t = ElboTerms {
            rec: 0.0,
            kl_z: vec![0.0; 3],
            kl_c: vec![5.0],
            set_size: 1,
        };
        assert_eq!(t.kl_c_by_layer(3), vec![0.0, 0.0, 5.0]);
    }
}
