//! Unconditional, single-pass conditional and refined conditional sampling.
//!
//! Refinement treats the model as a transition kernel: the current guess `x` is
//! appended to the conditioning set, the joint latent is re-inferred from the
//! augmented set, and the appended slot is regenerated from the likelihood.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::RefineMode;
use crate::error::{Error, Result};
use crate::model::{Model, RunInput, Source};
use crate::rng::{LatentKind, NoiseSite, NoiseSource, SeededRng, StreamNoise};
use crate::tape::kernels::sigmoid;
use crate::tape::{Tape, Var};

/// A model that supports single-pass conditional sampling and the refinement kernel.
pub trait RefinableModel {
    /// What gets appended to the conditioning set.
    type Obs: Clone;
    /// What each step emits.
    type Draw: Clone;

    fn conditional(&self, set: &[Self::Obs], rng: &mut SeededRng) -> Result<Self::Draw>;

    /// Re-infers latents from `augmented` (the set with the current guess last) and
    /// returns a fresh draw for the last slot.
    fn resample_last(&self, augmented: &[Self::Obs], rng: &mut SeededRng) -> Result<Self::Draw>;

    /// Converts a draw into the observation fed back into the set.
    fn feed(&self, draw: &Self::Draw) -> Self::Obs;
}

/// Runs `iters` refinement steps starting from a single-pass conditional draw.
/// Returns the trajectory, `iters + 1` entries with the initial draw first.
pub fn refine<M: RefinableModel>(model: &M, set: &[M::Obs], iters: usize, rng: &mut SeededRng) -> Result<Vec<M::Draw>> {
    let mut current = model.conditional(set, rng)?;
    let mut trajectory = Vec::with_capacity(iters + 1);
    trajectory.push(current.clone());
    let mut augmented = set.to_vec();
    augmented.push(model.feed(&current));
    for _ in 0..iters {
        current = model.resample_last(&augmented, rng)?;
        *augmented.last_mut().expect("augmented set is nonempty") = model.feed(&current);
        trajectory.push(current.clone());
    }
    Ok(trajectory)
}

/// One generated image: Bernoulli means and a binary draw from them.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageDraw {
    pub mean: Vec<f64>,
    pub binary: Vec<f64>,
}

fn draws_from_logits(tape: &Tape, logits: Var, rng: &mut SeededRng) -> Vec<ImageDraw> {
    let rows = tape.shape(logits)[0];
    let cols = tape.value(logits).len() / rows.max(1);
    tape.value(logits)
        .chunks(cols.max(1))
        .take(rows)
        .map(|l| {
            let mean: Vec<f64> = l.iter().map(|&v| sigmoid(v)).collect();
            let binary = mean.iter().map(|&p| if rng.random::<f64>() < p { 1.0 } else { 0.0 }).collect();
            ImageDraw { mean, binary }
        })
        .collect()
}

/// `n` images from the prior hierarchy, sharing one top context draw.
pub fn sample_unconditional(model: &Model, n: usize, rng: &mut SeededRng) -> Result<Vec<ImageDraw>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut g = model.graph(false);
    let input = RunInput {
        sets: 1,
        set_size: n,
        features: None,
        top_context: None,
        source: Source::Prior,
    };
    let state = model.run(&mut g, input, &mut StreamNoise::new(rng))?;
    let logits = model.decode_state(&mut g, &state)?;
    Ok(draws_from_logits(&g.tape, logits, rng))
}

/// Single pass: `c_L ~ q(c_L | X)`, then the remaining latents of `n` new samples
/// from the prior hierarchy.
pub fn sample_conditional(model: &Model, set: &[Vec<f64>], n: usize, rng: &mut SeededRng) -> Result<Vec<ImageDraw>> {
    if set.is_empty() {
        return Err(Error::Contract("conditional sampling from an empty set".into()));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut g = model.graph(false);
    let top_context = if model.config.context {
        let x = model.images(&mut g, set)?;
        let h = model.encode_trunk(&mut g, x);
        let q = model.posterior_c_top(&mut g, h, set.len())?;
        let width = g.tape.value(q.mean).len();
        let eps = StreamNoise::new(rng).draw(NoiseSite {
            kind: LatentKind::Context,
            layer: model.config.layers,
            rows: 1,
            width,
        });
        Some(q.rsample(&mut g.tape, eps))
    } else {
        None
    };
    let input = RunInput {
        sets: 1,
        set_size: n,
        features: None,
        top_context,
        source: Source::Prior,
    };
    let state = model.run(&mut g, input, &mut StreamNoise::new(rng))?;
    let logits = model.decode_state(&mut g, &state)?;
    Ok(draws_from_logits(&g.tape, logits, rng))
}

/// Refinement kernel over a trained image model.
pub struct ImageSampler<'a> {
    pub model: &'a Model,
    pub mode: RefineMode,
    /// Feed binary draws back into the set instead of Bernoulli means.
    pub hard: bool,
}

impl RefinableModel for ImageSampler<'_> {
    type Obs = Vec<f64>;
    type Draw = ImageDraw;

    fn conditional(&self, set: &[Vec<f64>], rng: &mut SeededRng) -> Result<ImageDraw> {
        Ok(sample_conditional(self.model, set, 1, rng)?.remove(0))
    }

    fn resample_last(&self, augmented: &[Vec<f64>], rng: &mut SeededRng) -> Result<ImageDraw> {
        let model = self.model;
        let mut g = model.graph(false);
        let x = model.images(&mut g, augmented)?;
        let features = model.encode_trunk(&mut g, x);
        let input = RunInput {
            sets: 1,
            set_size: augmented.len(),
            features: Some(features),
            top_context: None,
            source: match self.mode {
                RefineMode::Posterior => Source::Posterior,
                RefineMode::Mixed => Source::Mixed,
            },
        };
        let state = model.run(&mut g, input, &mut StreamNoise::new(rng))?;
        let logits = model.decode_state(&mut g, &state)?;
        let last = g.tape.gather(logits, &[augmented.len() - 1]);
        Ok(draws_from_logits(&g.tape, last, rng).remove(0))
    }

    fn feed(&self, draw: &ImageDraw) -> Vec<f64> {
        if self.hard {
            draw.binary.clone()
        } else {
            draw.mean.clone()
        }
    }
}

pub fn sample_refined(model: &Model, set: &[Vec<f64>], iters: usize, mode: RefineMode, hard: bool, rng: &mut SeededRng) -> Result<Vec<ImageDraw>> {
    if set.is_empty() {
        return Err(Error::Contract("refined sampling from an empty set".into()));
    }
    refine(&ImageSampler { model, mode, hard }, set, iters, rng)
}

/// Writes an 8-bit binary PGM.
pub fn write_pgm(path: &Path, pixels: &[f64], side: usize) -> Result<()> {
    let bytes: Vec<u8> = pixels.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let img = image::GrayImage::from_raw(side as u32, side as u32, bytes)
        .ok_or_else(|| Error::Contract(format!("{} pixels do not form a {side}x{side} image", pixels.len())))?;
    img.save(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Tiles rows of equally sized images into one PGM with a one-pixel gutter.
pub fn write_grid(path: &Path, rows: &[Vec<Vec<f64>>], side: usize) -> Result<()> {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let (w, h) = (cols * (side + 1) + 1, rows.len() * (side + 1) + 1);
    let mut canvas = vec![0.5; w * h];
    for (r, row) in rows.iter().enumerate() {
        for (c, im) in row.iter().enumerate() {
            for y in 0..side {
                let dst = (r * (side + 1) + 1 + y) * w + c * (side + 1) + 1;
                canvas[dst..dst + side].copy_from_slice(&im[y * side..(y + 1) * side]);
            }
        }
    }
    let bytes: Vec<u8> = canvas.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    image::GrayImage::from_raw(w as u32, h as u32, bytes)
        .expect("canvas size")
        .save(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// One line of the sample manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub kind: String,
    pub class_id: String,
    pub seed: u64,
    pub iteration: usize,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = String::from("file,kind,class_id,seed,iteration\n");
    for e in entries {
        out.push_str(&format!("{},{},{},{},{}\n", e.file, e.kind, e.class_id, e.seed, e.iteration));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
