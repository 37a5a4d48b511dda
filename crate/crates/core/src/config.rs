//! Model and run configuration, loaded from JSON with `model`, `train`, `data`
//! and `eval` sections.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aggregation::Aggregator;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// One context latent, one per-sample latent.
    Bns,
    /// One context latent shared by a ladder of per-sample latents.
    Ns,
    /// A ladder of context latents interleaved with the per-sample ladder.
    Hfsgm,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bns" => Ok(Self::Bns),
            "ns" => Ok(Self::Ns),
            "hfsgm" => Ok(Self::Hfsgm),
            other => Err(Error::Config(format!("unknown variant '{other}' (expected bns, ns or hfsgm)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub aggregator: Aggregator,
    pub layers: usize,
    pub c_channels: usize,
    pub z_channels: usize,
    /// Side of the latent grid; 1 gives dense vector latents.
    pub latent_resolution: usize,
    pub hidden_channels: usize,
    /// Channel width of each stride-2 encoder stage.
    pub encoder_widths: Vec<usize>,
    pub image_size: usize,
    pub heads: usize,
    pub batch_norm: bool,
    /// When false the context path is cut: `c` is fixed at zero and carries no KL.
    pub context: bool,
    pub lag_residual: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Hfsgm,
            aggregator: Aggregator::Lag,
            layers: 3,
            c_channels: 64,
            z_channels: 32,
            latent_resolution: 4,
            hidden_channels: 128,
            encoder_widths: vec![32, 64, 128],
            image_size: 28,
            heads: 4,
            batch_norm: true,
            context: true,
            lag_residual: false,
            seed: 0,
        }
    }
}

/// Output side of a 3x3, stride-2, pad-1 convolution.
pub fn halve(side: usize) -> usize {
    (side - 1) / 2 + 1
}

impl ModelConfig {
    /// Spatial side after every encoder stage, starting with the image side.
    pub fn stage_sides(&self) -> Vec<usize> {
        let mut sides = vec![self.image_size];
        for _ in &self.encoder_widths {
            let last = *sides.last().expect("nonempty");
            sides.push(halve(last));
        }
        sides
    }

    pub fn encoder_side(&self) -> usize {
        *self.stage_sides().last().expect("nonempty")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::Config(format!("model.{field}: {msg}")));
        if self.layers == 0 {
            return bad("layers", "must be at least 1".into());
        }
        if self.variant == Variant::Bns && self.layers != 1 {
            return bad("layers", format!("the bns variant has exactly one layer, got {}", self.layers));
        }
        for (field, v) in [
            ("c_channels", self.c_channels),
            ("z_channels", self.z_channels),
            ("hidden_channels", self.hidden_channels),
            ("latent_resolution", self.latent_resolution),
            ("heads", self.heads),
        ] {
            if v == 0 {
                return bad(field, "must be positive".into());
            }
        }
        if self.encoder_widths.is_empty() || self.encoder_widths.contains(&0) {
            return bad("encoder_widths", "needs at least one stage, all widths positive".into());
        }
        if self.image_size < 2 {
            return bad("image_size", format!("too small: {}", self.image_size));
        }
        let side = self.encoder_side();
        if side % self.latent_resolution != 0 {
            return bad(
                "latent_resolution",
                format!("{} does not divide the encoder output side {side}", self.latent_resolution),
            );
        }
        if self.aggregator == Aggregator::Lag && self.hidden_channels % self.heads != 0 {
            return bad(
                "heads",
                format!("{} heads do not divide hidden_channels {}", self.heads, self.hidden_channels),
            );
        }
        Ok(())
    }

    /// Number of context latents: `layers` for HFSGM, otherwise one.
    pub fn context_layers(&self) -> usize {
        match self.variant {
            Variant::Hfsgm => self.layers,
            Variant::Ns | Variant::Bns => 1,
        }
    }

    /// Kernel of the latent-space networks: 3x3 on spatial grids, 1x1 on vectors.
    pub fn latent_kernel(&self) -> usize {
        if self.latent_resolution > 1 {
            3
        } else {
            1
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Binarization {
    Static,
    Dynamic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Observations per minibatch; sets per minibatch is `batch_size / set_size`.
    pub batch_size: usize,
    pub set_size: usize,
    /// Episodes resampled per epoch.
    pub episodes_per_epoch: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub alpha_step: f64,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub val_episodes: usize,
    pub binarization: Binarization,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 400,
            batch_size: 100,
            set_size: 5,
            episodes_per_epoch: 1000,
            learning_rate: 1e-3,
            weight_decay: 1e-5,
            alpha: 1.0,
            alpha_step: 0.98,
            plateau_patience: 10,
            plateau_factor: 0.5,
            val_episodes: 200,
            binarization: Binarization::Dynamic,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    /// `root/<class_id>/<image>.pgm|png`.
    Dir,
    /// Single packed file.
    Packed,
    /// Procedurally generated stroke glyphs.
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub per_class: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: 100,
            per_class: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub format: DataFormat,
    /// Dataset directory or packed file; falls back to `HFSGM_DATA_ROOT`.
    pub root: Option<PathBuf>,
    /// Class counts for train, val and test.
    pub splits: [usize; 3],
    pub split_seed: u64,
    pub synthetic: SyntheticConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            format: DataFormat::Dir,
            root: None,
            splits: [1000, 200, 423],
            split_seed: 0,
            synthetic: SyntheticConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefineMode {
    /// Full posterior over the augmented set.
    Posterior,
    /// Top context and top per-sample latents from the posterior, the rest from the prior.
    Mixed,
}

impl std::str::FromStr for RefineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "posterior" => Ok(Self::Posterior),
            "mixed" => Ok(Self::Mixed),
            other => Err(Error::Config(format!("unknown refine mode '{other}' (expected posterior or mixed)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub split: String,
    pub set_size: usize,
    pub episodes: usize,
    pub importance_samples: usize,
    pub sweep_sizes: Vec<usize>,
    pub classify_ways: usize,
    pub classify_shots: usize,
    pub classify_queries: usize,
    pub predictive_draws: usize,
    pub kl_argmin: bool,
    pub refine_iters: usize,
    pub refine_mode: RefineMode,
    /// Feed binary draws (instead of Bernoulli means) back into the refinement chain.
    pub refine_hard: bool,
    pub samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: "test".into(),
            set_size: 5,
            episodes: 200,
            importance_samples: 1000,
            sweep_sizes: (1..=20).collect(),
            classify_ways: 10,
            classify_shots: 5,
            classify_queries: 10,
            predictive_draws: 100,
            kl_argmin: false,
            refine_iters: 20,
            refine_mode: RefineMode::Posterior,
            refine_hard: false,
            samples: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.train;
        let bad = |field: &str, msg: String| Err(Error::Config(format!("train.{field}: {msg}")));
        if t.set_size == 0 {
            return bad("set_size", "must be at least 1".into());
        }
        if t.batch_size < t.set_size {
            return bad("batch_size", format!("{} is smaller than set_size {}", t.batch_size, t.set_size));
        }
        if !(t.learning_rate > 0.0) {
            return bad("learning_rate", format!("must be positive, got {}", t.learning_rate));
        }
        if !(t.alpha >= 0.0) {
            return bad("alpha", format!("must be nonnegative, got {}", t.alpha));
        }
        if !(t.alpha_step > 0.0 && t.alpha_step <= 1.0) {
            return bad("alpha_step", format!("must lie in (0, 1], got {}", t.alpha_step));
        }
        if !(t.plateau_factor > 0.0 && t.plateau_factor <= 1.0) {
            return bad("plateau_factor", format!("must lie in (0, 1], got {}", t.plateau_factor));
        }
        if self.eval.importance_samples == 0 {
            return Err(Error::Config("eval.importance_samples: must be at least 1".into()));
        }
        Ok(())
    }

    /// Sets per minibatch.
    pub fn sets_per_batch(&self) -> usize {
        (self.train.batch_size / self.train.set_size).max(1)
    }

    /// Full-scale defaults for binarized Omniglot.
    pub fn full() -> Self {
        Self::default()
    }

    /// Desk-scale preset on synthetic stroke glyphs.
    pub fn toy() -> Self {
        Self {
            model: ModelConfig {
                variant: Variant::Ns,
                aggregator: Aggregator::Mean,
                layers: 3,
                c_channels: 8,
                z_channels: 4,
                latent_resolution: 4,
                hidden_channels: 16,
                encoder_widths: vec![8, 16, 16],
                image_size: 28,
                heads: 4,
                batch_norm: true,
                context: true,
                lag_residual: false,
                seed: 1,
            },
            train: TrainConfig {
                epochs: 40,
                batch_size: 50,
                set_size: 5,
                episodes_per_epoch: 500,
                learning_rate: 2e-3,
                alpha: 1.0,
                alpha_step: 0.9,
                val_episodes: 50,
                seed: 1,
                ..TrainConfig::default()
            },
            data: DataConfig {
                format: DataFormat::Synthetic,
                root: None,
                splits: [60, 20, 20],
                split_seed: 1,
                synthetic: SyntheticConfig {
                    classes: 100,
                    per_class: 20,
                    seed: 1,
                },
            },
            eval: EvalConfig {
                importance_samples: 100,
                episodes: 50,
                sweep_sizes: vec![1, 2, 5, 10, 20],
                predictive_draws: 20,
                ..EvalConfig::default()
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        RunConfig::full().validate().unwrap();
        RunConfig::toy().validate().unwrap();
        assert_eq!(RunConfig::full().model.stage_sides(), vec![28, 14, 7, 4]);
    }

    #[test]
    fn shipped_configs_match_presets() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        assert_eq!(RunConfig::load(&dir.join("toy.json")).unwrap(), RunConfig::toy());
        assert_eq!(RunConfig::load(&dir.join("full.json")).unwrap(), RunConfig::full());
    }

    #[test]
    fn json_roundtrip_and_partial_sections() {
        let cfg = RunConfig::toy();
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        let partial = RunConfig::from_json(r#"{"model": {"layers": 2}}"#).unwrap();
        assert_eq!(partial.model.layers, 2);
        assert_eq!(partial.train.learning_rate, 1e-3);
    }

    #[test]
    fn invalid_fields_are_named() {
        let err = RunConfig::from_json(r#"{"model": {"variant": "bns", "layers": 3}}"#).unwrap_err();
        assert!(err.to_string().contains("model.layers"), "{err}");
        let err = RunConfig::from_json(r#"{"model": {"latent_resolution": 3}}"#).unwrap_err();
        assert!(err.to_string().contains("latent_resolution"), "{err}");
        let err = RunConfig::from_json(r#"{"train": {"alpha": -1}}"#).unwrap_err();
        assert!(err.to_string().contains("train.alpha"), "{err}");
        assert!(RunConfig::from_json(r#"{"model": {"nope": 1}}"#).is_err());
    }
}
