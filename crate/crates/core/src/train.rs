//! Episodic training loop with α annealing, plateau learning-rate decay,
//! validation and resumable checkpoints.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::checkpoint::{self, Blobs};
use crate::config::{Binarization, RunConfig};
use crate::episodes::{build_splits, sample_episode, ClassIndexedDataset, ClassSplits, SetBatch, Split};
use crate::error::{Error, Result};
use crate::evaluation::{csv_header, draw_episodes, evaluate_episodes, MetricsRow};
use crate::model::Model;
use crate::objective::{anneal, batch_loss, AnnealState, ElboTerms};
use crate::optim::{Adam, AdamConfig, Plateau};
use crate::rng::{mix64, seeded, SeededRng, StreamNoise};

const VAL_STREAM: u64 = 0x5641_4c00;
const STATE_LEN: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    /// Mean weighted training loss over the epoch's minibatches.
    pub loss: f64,
    pub train: MetricsRow,
    pub val: MetricsRow,
    pub lr: f64,
    pub alpha: f64,
    pub improved: bool,
}

pub struct Trainer {
    pub config: RunConfig,
    pub model: Model,
    adam: Adam,
    names: Vec<String>,
    /// Completed epochs.
    pub epoch: usize,
    pub anneal: AnnealState,
    pub plateau: Plateau,
    pub best_val: f64,
    dataset: ClassIndexedDataset,
    splits: ClassSplits,
    val_episodes: Vec<SetBatch>,
}

impl Trainer {
    pub fn new(config: RunConfig, dataset: ClassIndexedDataset) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model.clone())?;
        Self::with_model(config, dataset, model)
    }

    /// Starts from an existing model (for example a custom initialization).
    pub fn with_model(config: RunConfig, dataset: ClassIndexedDataset, model: Model) -> Result<Self> {
        if dataset.height() != config.model.image_size || dataset.width() != config.model.image_size {
            return Err(Error::Data(format!(
                "dataset images are {}x{}, model expects {}",
                dataset.height(),
                dataset.width(),
                config.model.image_size
            )));
        }
        let splits = build_splits(&dataset, config.data.splits, config.data.split_seed)?;
        let t = &config.train;
        let val_episodes = draw_episodes(
            &dataset,
            &splits,
            Split::Val,
            t.set_size,
            t.val_episodes,
            Binarization::Static,
            &mut seeded(mix64(t.seed ^ VAL_STREAM)),
        )?;
        let names = model.params.trainable_names();
        let sizes: Vec<usize> = names.iter().map(|n| model.params.get(n).expect("listed").data.len()).collect();
        let adam = Adam::new(
            &sizes,
            AdamConfig {
                lr: t.learning_rate,
                weight_decay: t.weight_decay,
                ..AdamConfig::default()
            },
        );
        Ok(Self {
            anneal: AnnealState {
                alpha: t.alpha,
                alpha_step: t.alpha_step,
            },
            plateau: Plateau::new(t.plateau_patience, t.plateau_factor),
            best_val: f64::INFINITY,
            epoch: 0,
            config,
            model,
            adam,
            names,
            dataset,
            splits,
            val_episodes,
        })
    }

    /// Restores model, optimizer and schedule state from a checkpoint.
    pub fn resume(config: RunConfig, dataset: ClassIndexedDataset, path: &Path) -> Result<Self> {
        let ck = checkpoint::load_matching(path, &config.model)?;
        let mut trainer = Self::with_model(config, dataset, ck.model)?;
        let corrupt = |msg: String| Error::Corrupt {
            path: path.to_path_buf(),
            msg,
        };
        let state = match ck.extra.get("train.state") {
            Some((_, v)) if v.len() == STATE_LEN => v.clone(),
            _ => return Err(corrupt("missing training state".into())),
        };
        trainer.epoch = state[0] as usize;
        trainer.anneal = AnnealState {
            alpha: state[1],
            alpha_step: state[2],
        };
        trainer.adam.config.lr = state[3];
        trainer.plateau.best = state[4];
        trainer.plateau.stale = state[5] as usize;
        trainer.adam.step = state[6] as u64;
        trainer.best_val = state[7];
        for (i, name) in trainer.names.iter().enumerate() {
            for (key, slot) in [("adam.m", &mut trainer.adam.first[i]), ("adam.v", &mut trainer.adam.second[i])] {
                match ck.extra.get(&format!("{key}.{name}")) {
                    Some((_, v)) if v.len() == slot.len() => slot.copy_from_slice(v),
                    _ => return Err(corrupt(format!("missing or malformed optimizer state {key}.{name}"))),
                }
            }
        }
        Ok(trainer)
    }

    pub fn splits(&self) -> &ClassSplits {
        &self.splits
    }

    pub fn dataset(&self) -> &ClassIndexedDataset {
        &self.dataset
    }

    pub fn learning_rate(&self) -> f64 {
        self.adam.config.lr
    }

    /// One optimizer step on a minibatch; returns its weighted loss and per-set terms.
    pub fn step(&mut self, batch: &[SetBatch], rng: &mut SeededRng) -> Result<(f64, Vec<ElboTerms>)> {
        let out = batch_loss(&self.model, batch, self.anneal.alpha, true, &mut StreamNoise::new(rng))?;
        if !out.loss.is_finite() {
            return Err(Error::Verification(format!("training loss became {} at epoch {}", out.loss, self.epoch + 1)));
        }
        let grads: Vec<Option<&[f64]>> = self.names.iter().map(|n| out.gradients.get(n).map(Vec::as_slice)).collect();
        let mut slices: Vec<&mut [f64]> = self
            .model
            .params
            .iter_mut()
            .filter(|(_, t)| t.trainable)
            .map(|(_, t)| t.data.as_mut_slice())
            .collect();
        self.adam.update(&mut slices, &grads);
        self.model.params.apply_running_updates(&out.running);
        Ok((out.loss, out.terms))
    }

    /// Resamples the episode collection, runs one pass of minibatch updates, then
    /// validates and advances the schedules.
    pub fn run_epoch(&mut self) -> Result<EpochReport> {
        let start = std::time::Instant::now();
        let t = self.config.train.clone();
        let epoch = self.epoch + 1;
        let mut rng = seeded(mix64(t.seed.wrapping_add(epoch as u64)));
        let episodes = (0..t.episodes_per_epoch)
            .map(|_| sample_episode(&self.dataset, &self.splits, Split::Train, t.set_size, t.binarization, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let alpha = self.anneal.alpha;
        let mut terms = Vec::with_capacity(episodes.len());
        let mut loss_sum = 0.0;
        for batch in episodes.chunks(self.config.sets_per_batch()) {
            let (loss, batch_terms) = self.step(batch, &mut rng)?;
            loss_sum += loss * batch.len() as f64;
            terms.extend(batch_terms);
        }
        let layers = self.config.model.layers;
        let mut train = MetricsRow::from_terms(&ElboTerms::mean(&terms)?, layers, Split::Train.name(), Some(epoch));
        train.seconds = start.elapsed().as_secs_f64();

        let mut val = evaluate_episodes(&self.model, &self.val_episodes, 0, Split::Val.name(), &mut seeded(mix64(t.seed ^ VAL_STREAM ^ 1)))?;
        val.epoch = Some(epoch);
        let improved = val.nelbo < self.best_val;
        if improved {
            self.best_val = val.nelbo;
        }
        self.adam.config.lr *= self.plateau.observe(val.nelbo);
        self.anneal = anneal(self.anneal);
        self.epoch = epoch;
        Ok(EpochReport {
            epoch,
            loss: loss_sum / episodes.len() as f64,
            train,
            val,
            lr: self.adam.config.lr,
            alpha,
            improved,
        })
    }

    fn extra(&self) -> Blobs {
        let mut extra = Blobs::new();
        let state = vec![
            self.epoch as f64,
            self.anneal.alpha,
            self.anneal.alpha_step,
            self.adam.config.lr,
            self.plateau.best,
            self.plateau.stale as f64,
            self.adam.step as f64,
            self.best_val,
        ];
        extra.insert("train.state".into(), (vec![STATE_LEN], state));
        for (i, name) in self.names.iter().enumerate() {
            let n = self.adam.first[i].len();
            extra.insert(format!("adam.m.{name}"), (vec![n], self.adam.first[i].clone()));
            extra.insert(format!("adam.v.{name}"), (vec![n], self.adam.second[i].clone()));
        }
        extra
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.model, &self.extra())
    }
}

/// Files written by [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutputs {
    pub metrics: PathBuf,
    pub last: PathBuf,
    pub best: PathBuf,
    pub reports: Vec<EpochReport>,
}

impl TrainOutputs {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            metrics: dir.join("metrics.csv"),
            last: dir.join("last.ckpt"),
            best: dir.join("best.ckpt"),
            reports: Vec::new(),
        }
    }
}

/// Trains until `config.train.epochs` are complete, writing one train and one val
/// row per epoch to `out/metrics.csv`, `out/last.ckpt` after every epoch and
/// `out/best.ckpt` whenever validation NELBO improves. Resuming appends to the CSV.
pub fn train(
    config: RunConfig,
    dataset: ClassIndexedDataset,
    out: &Path,
    resume: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<TrainOutputs> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut outputs = TrainOutputs::in_dir(out);
    let mut trainer = match resume {
        Some(path) => Trainer::resume(config, dataset, path)?,
        None => Trainer::new(config, dataset)?,
    };
    let layers = trainer.config.model.layers;
    let metrics = &outputs.metrics;
    let mut csv = if resume.is_some() && metrics.exists() {
        std::fs::OpenOptions::new().append(true).open(metrics)
    } else {
        std::fs::File::create(metrics).and_then(|mut f| writeln!(f, "{}", csv_header(layers)).map(|_| f))
    }
    .map_err(|e| Error::io(metrics, e))?;
    while trainer.epoch < trainer.config.train.epochs {
        let report = trainer.run_epoch()?;
        writeln!(csv, "{}\n{}", report.train.csv_line(), report.val.csv_line()).map_err(|e| Error::io(metrics, e))?;
        csv.flush().map_err(|e| Error::io(metrics, e))?;
        trainer.save(&outputs.last)?;
        if report.improved {
            trainer.save(&outputs.best)?;
        }
        on_epoch(&report);
        outputs.reports.push(report);
    }
    Ok(outputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::Aggregator;
    use crate::config::{ModelConfig, Variant};
    use crate::synthetic::strokes_dataset;

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model = ModelConfig {
            variant: Variant::Hfsgm,
            aggregator: Aggregator::Lag,
            layers: 2,
            c_channels: 2,
            z_channels: 2,
            latent_resolution: 2,
            hidden_channels: 4,
            encoder_widths: vec![3, 3],
            image_size: 8,
            heads: 2,
            ..ModelConfig::default()
        };
        cfg.train.epochs = 2;
        cfg.train.batch_size = 6;
        cfg.train.set_size = 3;
        cfg.train.episodes_per_epoch = 5;
        cfg.train.val_episodes = 3;
        cfg.data.splits = [3, 2, 1];
        cfg
    }

    #[test]
    fn resume_continues_identically() {
        let ds = strokes_dataset(6, 4, 8, 0);
        let dir = tempfile::tempdir().unwrap();
        let straight = train(tiny(), ds.clone(), &dir.path().join("a"), None, |_| {}).unwrap();

        let mut first = tiny();
        first.train.epochs = 1;
        let part = train(first, ds.clone(), &dir.path().join("b"), None, |_| {}).unwrap();
        let resumed = Trainer::resume(tiny(), ds.clone(), &part.last).unwrap();
        assert_eq!(resumed.epoch, 1);
        assert_eq!(resumed.anneal.alpha, tiny().train.alpha * tiny().train.alpha_step);
        let done = train(tiny(), ds, &dir.path().join("b"), Some(&part.last), |_| {}).unwrap();
        assert_eq!(done.reports.len(), 1);

        let a = checkpoint::load(&straight.last).unwrap();
        let b = checkpoint::load(&done.last).unwrap();
        assert_eq!(a.model, b.model);
        let strip = |p: &Path| -> Vec<String> {
            std::fs::read_to_string(p)
                .unwrap()
                .lines()
                .map(|l| l.rsplit_once(',').unwrap().0.to_string())
                .collect()
        };
        assert_eq!(strip(&straight.metrics), strip(&done.metrics));
        assert_eq!(strip(&straight.metrics).len(), 5);
    }

    #[test]
    fn image_size_mismatch_is_a_data_error() {
        let ds = strokes_dataset(6, 4, 10, 0);
        assert!(matches!(Trainer::new(tiny(), ds), Err(Error::Data(_))));
    }
}
