//! Generative and inference networks for the bNS, NS and HFSGM variants.
//!
//! Tensors are `[rows, channels, R, R]` with `R` the latent resolution. Set-level
//! tensors (context latents) have one row per set; per-sample tensors have
//! `sets * set_size` rows, grouped set by set. Context conditioning is bias-only:
//! a projection of `c` is added to the features it modulates.
//!
//! Parameter names follow the network they belong to: `enc.*` (shared trunk),
//! `qc{l}.*` / `pc{l}.*` (context posterior / prior at layer `l`), `qz{l}.*` /
//! `pz{l}.*` (per-sample posterior / prior) and `dec.*` (decoder).

use rand::Rng;
use rand_distr::StandardNormal;

use crate::aggregation::{canonical_order, lag_attend, Aggregator, LagNodes, LagOptions};
use crate::config::{ModelConfig, Variant};
use crate::distributions::GaussianNode;
use crate::error::{Error, Result};
use crate::params::{Graph, Parameters};
use crate::rng::{seeded, LatentKind, NoiseSite, NoiseSource};
use crate::tape::Var;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitScheme {
    /// He-normal weights, zero biases, zero-initialized output heads.
    Standard,
    /// Every weight and bias zero (batch-norm scales stay 1).
    Zero,
    /// Every weight and bias drawn from `N(0, scale^2)`, heads included.
    Random { scale: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Role {
    Weight { fan_in: usize },
    Bias,
    Head,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

struct Spec {
    name: String,
    shape: Vec<usize>,
    role: Role,
}

#[derive(Default)]
struct SpecList(Vec<Spec>);

impl SpecList {
    fn push(&mut self, name: String, shape: Vec<usize>, role: Role) {
        self.0.push(Spec { name, shape, role });
    }

    fn conv(&mut self, name: &str, out: usize, inp: usize, k: usize) {
        self.push(format!("{name}.w"), vec![out, inp, k, k], Role::Weight { fan_in: inp * k * k });
        self.push(format!("{name}.b"), vec![out], Role::Bias);
    }

    fn head(&mut self, name: &str, out: usize, inp: usize, k: usize) {
        self.push(format!("{name}.w"), vec![out, inp, k, k], Role::Head);
        self.push(format!("{name}.b"), vec![out], Role::Head);
    }

    fn conv_transpose(&mut self, name: &str, inp: usize, out: usize, k: usize) {
        self.push(format!("{name}.w"), vec![inp, out, k, k], Role::Weight { fan_in: inp * k * k });
        self.push(format!("{name}.b"), vec![out], Role::Bias);
    }

    fn batch_norm(&mut self, name: &str, ch: usize) {
        self.push(format!("{name}.gamma"), vec![ch], Role::Gamma);
        self.push(format!("{name}.beta"), vec![ch], Role::Beta);
        self.push(format!("{name}.running_mean"), vec![ch], Role::RunningMean);
        self.push(format!("{name}.running_var"), vec![ch], Role::RunningVar);
    }

    fn lag(&mut self, net: &str, dim: usize) {
        for part in ["query", "key", "value", "merge"] {
            self.conv(&format!("{net}.lag.{part}"), dim, dim, 1);
        }
    }
}

/// Where each latent is drawn from during a top-down pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    /// Every latent from the inference network (priors are still evaluated).
    Posterior,
    /// Every latent from the prior hierarchy.
    Prior,
    /// Top context and top per-sample latents from the posterior, the rest from the prior.
    Mixed,
}

pub struct RunInput {
    pub sets: usize,
    pub set_size: usize,
    /// Trunk features `[sets * set_size, hidden, R, R]`; required unless `source` is `Prior`.
    pub features: Option<Var>,
    /// Overrides the top context sample (`[sets, c_channels, R, R]`).
    pub top_context: Option<Var>,
    pub source: Source,
}

/// One latent: its sample and the distributions it was scored under.
#[derive(Debug, Clone, Copy)]
pub struct Slot {
    pub sample: Var,
    pub posterior: Option<GaussianNode>,
    pub prior: GaussianNode,
}

/// Result of a top-down pass. Vectors are indexed by `layer - 1`.
#[derive(Debug, Clone)]
pub struct LatentState {
    pub sets: usize,
    pub set_size: usize,
    pub z: Vec<Slot>,
    /// Context latents; `None` at layers without their own context latent.
    pub c: Vec<Option<Slot>>,
    /// Context used by each layer's per-sample networks, `[sets, c_channels, R, R]`.
    pub context: Vec<Var>,
    /// Context fed to the decoder.
    pub decoder_context: Var,
}

impl LatentState {
    pub fn context_slots(&self) -> impl Iterator<Item = (usize, &Slot)> {
        self.c.iter().enumerate().filter_map(|(i, s)| s.as_ref().map(|s| (i + 1, s)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Parameters,
}

fn elu(g: &mut Graph, x: Var) -> Var {
    g.tape.elu(x)
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        Self::with_init(config, InitScheme::Standard)
    }

    pub fn with_init(config: ModelConfig, init: InitScheme) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(config.seed);
        let mut params = Parameters::new();
        for spec in Self::specs(&config).0 {
            let n: usize = spec.shape.iter().product();
            let mut normal = |std: f64| -> Vec<f64> { (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect() };
            let (data, trainable) = match (spec.role, init) {
                (Role::Gamma, _) | (Role::RunningVar, _) => (vec![1.0; n], spec.role == Role::Gamma),
                (Role::Beta, _) => (vec![0.0; n], true),
                (Role::RunningMean, _) => (vec![0.0; n], false),
                (_, InitScheme::Zero) => (vec![0.0; n], true),
                (_, InitScheme::Random { scale }) => (normal(scale), true),
                (Role::Weight { fan_in }, InitScheme::Standard) => (normal((2.0 / fan_in as f64).sqrt()), true),
                (Role::Bias | Role::Head, InitScheme::Standard) => (vec![0.0; n], true),
            };
            params.insert(spec.name, &spec.shape, data, trainable);
        }
        Ok(Self { config, params })
    }

    fn specs(cfg: &ModelConfig) -> SpecList {
        let mut s = SpecList::default();
        let (hd, cc, cz, k) = (cfg.hidden_channels, cfg.c_channels, cfg.z_channels, cfg.latent_kernel());
        let widths = &cfg.encoder_widths;
        let n = widths.len();
        let last = widths[n - 1];
        let bn = cfg.batch_norm;
        let lag = cfg.aggregator == Aggregator::Lag;
        let big_l = cfg.layers;

        let mut input = 1;
        for (i, &w) in widths.iter().enumerate() {
            for (part, inp) in [("down", input), ("same", w)] {
                let name = format!("enc.{i}.{part}");
                s.conv(&name, w, inp, 3);
                if bn {
                    s.batch_norm(&format!("{name}.bn"), w);
                }
            }
            input = w;
        }
        let f = cfg.encoder_side() / cfg.latent_resolution;
        s.conv("enc.latent", hd, last, if f == 1 { 3 } else { f });

        if cfg.context {
            let top = format!("qc{big_l}");
            if lag {
                s.lag(&top, hd);
            }
            s.conv(&format!("{top}.hidden"), hd, hd, k);
            s.head(&format!("{top}.mean"), cc, hd, k);
            s.head(&format!("{top}.logvar"), cc, hd, k);
            if cfg.variant == Variant::Hfsgm {
                for l in 1..big_l {
                    for (net, extra) in [("qc", hd), ("pc", 0)] {
                        let name = format!("{net}{l}");
                        s.conv(&format!("{name}.fuse"), hd, extra + cz + cc, k);
                        if lag {
                            s.lag(&name, hd);
                        }
                        s.conv(&format!("{name}.hidden"), hd, hd, k);
                        s.head(&format!("{name}.mean"), cc, hd, k);
                        s.head(&format!("{name}.logvar"), cc, hd, k);
                    }
                }
            }
        }

        for l in 1..=big_l {
            let above = if l < big_l { cz } else { 0 };
            for (net, inp) in [("qz", hd + above), ("pz", above)] {
                let name = format!("{net}{l}");
                if inp > 0 {
                    s.conv(&format!("{name}.in"), hd, inp, k);
                }
                s.conv(&format!("{name}.film"), hd, cc, k);
                s.head(&format!("{name}.mean"), cz, hd, k);
                s.head(&format!("{name}.logvar"), cz, hd, k);
            }
        }

        let cd = cc * cfg.context_layers();
        s.conv("dec.in", hd, cz * big_l, k);
        s.conv("dec.film", hd, cd, k);
        if f == 1 {
            s.conv("dec.up", last, hd, 3);
        } else {
            s.conv_transpose("dec.up", hd, last, f);
        }
        if bn {
            s.batch_norm("dec.up.bn", last);
        }
        for i in (0..n).rev() {
            let w = widths[i];
            let out = if i > 0 { widths[i - 1] } else { widths[0] };
            s.conv(&format!("dec.{i}.same"), w, w, 3);
            s.conv(&format!("dec.{i}.film"), w, cd, 1);
            s.conv_transpose(&format!("dec.{i}.up"), w, out, 3);
            if bn {
                s.batch_norm(&format!("dec.{i}.same.bn"), w);
                s.batch_norm(&format!("dec.{i}.up.bn"), out);
            }
        }
        s.head("dec.out", 1, widths[0], 3);
        s
    }

    /// Names of every parameter array implied by `config`.
    pub fn parameter_names(config: &ModelConfig) -> Vec<String> {
        Self::specs(config).0.into_iter().map(|s| s.name).collect()
    }

    pub fn graph(&self, training: bool) -> Graph<'_> {
        Graph::new(&self.params, training)
    }

    fn pad(&self) -> usize {
        self.config.latent_kernel() / 2
    }

    fn side(&self) -> usize {
        self.config.image_size
    }

    /// Places images on the tape as `[N, 1, H, W]`.
    pub fn images(&self, g: &mut Graph, images: &[Vec<f64>]) -> Result<Var> {
        let side = self.side();
        let mut flat = Vec::with_capacity(images.len() * side * side);
        for (i, im) in images.iter().enumerate() {
            if im.len() != side * side {
                return Err(Error::Data(format!("image {i} has {} pixels, expected {side}x{side}", im.len())));
            }
            flat.extend_from_slice(im);
        }
        Ok(g.tape.leaf(flat, &[images.len(), 1, side, side]))
    }

    fn normed(&self, g: &mut Graph, x: Var, name: &str) -> Var {
        if self.config.batch_norm {
            g.batch_norm(x, &format!("{name}.bn"))
        } else {
            x
        }
    }

    /// Shared encoder: `[N, 1, H, W] -> [N, hidden, R, R]`.
    pub fn encode_trunk(&self, g: &mut Graph, x: Var) -> Var {
        let mut h = x;
        for i in 0..self.config.encoder_widths.len() {
            for (part, stride) in [("down", 2), ("same", 1)] {
                let name = format!("enc.{i}.{part}");
                h = g.conv(h, &name, stride, 1);
                h = self.normed(g, h, &name);
                h = elu(g, h);
            }
        }
        let f = self.config.encoder_side() / self.config.latent_resolution;
        h = if f == 1 { g.conv(h, "enc.latent", 1, 1) } else { g.conv(h, "enc.latent", f, 0) };
        elu(g, h)
    }

    /// Permutation-invariant pooling of `[T*S, hidden, R, R]` to `[T, hidden, R, R]`.
    fn pool(&self, g: &mut Graph, net: &str, elems: Var, set_size: usize) -> Var {
        match self.config.aggregator {
            Aggregator::Mean => {
                let rows = g.tape.shape(elems)[0];
                let order = canonical_order(g.tape.value(elems), rows, set_size);
                let sorted = if order.iter().enumerate().any(|(i, &o)| i != o) {
                    g.tape.gather(elems, &order)
                } else {
                    elems
                };
                g.tape.group_mean(sorted, set_size)
            }
            Aggregator::Max => g.tape.group_max(elems, set_size),
            Aggregator::Lag => {
                let mut bind = |part: &str| {
                    let w = g.param(&format!("{net}.lag.{part}.w"));
                    let b = g.param(&format!("{net}.lag.{part}.b"));
                    (w, b)
                };
                let nodes = LagNodes {
                    heads: self.config.heads,
                    query: bind("query"),
                    key: bind("key"),
                    value: bind("value"),
                    merge: bind("merge"),
                };
                let opts = LagOptions {
                    canonical_order: true,
                    residual: self.config.lag_residual,
                };
                lag_attend(&mut g.tape, elems, set_size, &nodes, opts).output
            }
        }
    }

    fn heads(&self, g: &mut Graph, net: &str, hidden: Var) -> GaussianNode {
        let pad = self.pad();
        let mean = g.conv(hidden, &format!("{net}.mean"), 1, pad);
        let log_var = g.conv(hidden, &format!("{net}.logvar"), 1, pad);
        GaussianNode::from_heads(&mut g.tape, mean, log_var)
    }

    fn pooled_head(&self, g: &mut Graph, net: &str, elems: Var, set_size: usize) -> GaussianNode {
        let pooled = self.pool(g, net, elems, set_size);
        let hidden = g.conv(pooled, &format!("{net}.hidden"), 1, self.pad());
        let hidden = elu(g, hidden);
        self.heads(g, net, hidden)
    }

    fn require_context(&self) -> Result<()> {
        if !self.config.context {
            return Err(Error::Variant("context path is disabled in this model".into()));
        }
        Ok(())
    }

    /// `q(c_L | X)` from trunk features of `T` sets of `set_size`.
    pub fn posterior_c_top(&self, g: &mut Graph, features: Var, set_size: usize) -> Result<GaussianNode> {
        self.require_context()?;
        Ok(self.pooled_head(g, &format!("qc{}", self.config.layers), features, set_size))
    }

    fn hierarchical_only(&self, layer: usize) -> Result<()> {
        self.require_context()?;
        if self.config.variant != Variant::Hfsgm {
            return Err(Error::Variant(format!("{:?} has no context latent below the top layer", self.config.variant)));
        }
        if layer == 0 || layer >= self.config.layers {
            return Err(Error::Contract(format!("context layer {layer} outside 1..{}", self.config.layers)));
        }
        Ok(())
    }

    /// `q(c_l | c_{l+1}, Z_{l+1}, X)` for `l < L`.
    pub fn posterior_c(&self, g: &mut Graph, layer: usize, c_above: Var, z_above: Var, features: Var, set_size: usize) -> Result<GaussianNode> {
        self.hierarchical_only(layer)?;
        let cb = g.tape.group_broadcast(c_above, set_size);
        let input = g.tape.concat(&[features, z_above, cb]);
        let net = format!("qc{layer}");
        let fused = g.conv(input, &format!("{net}.fuse"), 1, self.pad());
        let fused = elu(g, fused);
        Ok(self.pooled_head(g, &net, fused, set_size))
    }

    /// `p(c_l | c_{l+1}, Z_{l+1})` for `l < L`; `p(c_L)` is the standard normal.
    pub fn prior_c(&self, g: &mut Graph, layer: usize, c_above: Var, z_above: Var, set_size: usize) -> Result<GaussianNode> {
        self.hierarchical_only(layer)?;
        let cb = g.tape.group_broadcast(c_above, set_size);
        let input = g.tape.concat(&[z_above, cb]);
        let net = format!("pc{layer}");
        let fused = g.conv(input, &format!("{net}.fuse"), 1, self.pad());
        let fused = elu(g, fused);
        Ok(self.pooled_head(g, &net, fused, set_size))
    }

    fn film(&self, g: &mut Graph, net: &str, c: Var, set_size: usize) -> Var {
        let f = g.conv(c, &format!("{net}.film"), 1, self.pad());
        g.tape.group_broadcast(f, set_size)
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer == 0 || layer > self.config.layers {
            return Err(Error::Contract(format!("layer {layer} outside 1..={}", self.config.layers)));
        }
        Ok(())
    }

    /// `q(z_l | z_{l+1}, c_l, x)`; `z_above` is absent exactly at the top layer.
    pub fn posterior_z(&self, g: &mut Graph, layer: usize, z_above: Option<Var>, c: Var, features: Var, set_size: usize) -> Result<GaussianNode> {
        self.check_layer(layer)?;
        let top = layer == self.config.layers;
        if top != z_above.is_none() {
            return Err(Error::Contract(format!("layer {layer}: z_above must be absent exactly at the top layer")));
        }
        let net = format!("qz{layer}");
        let input = match z_above {
            Some(z) => g.tape.concat(&[features, z]),
            None => features,
        };
        let a = g.conv(input, &format!("{net}.in"), 1, self.pad());
        let f = self.film(g, &net, c, set_size);
        let h = g.tape.add(a, f);
        let h = elu(g, h);
        Ok(self.heads(g, &net, h))
    }

    /// `p(z_l | z_{l+1}, c_l)`.
    pub fn prior_z(&self, g: &mut Graph, layer: usize, z_above: Option<Var>, c: Var, set_size: usize) -> Result<GaussianNode> {
        self.check_layer(layer)?;
        let top = layer == self.config.layers;
        if top != z_above.is_none() {
            return Err(Error::Contract(format!("layer {layer}: z_above must be absent exactly at the top layer")));
        }
        let net = format!("pz{layer}");
        let mut h = self.film(g, &net, c, set_size);
        if let Some(z) = z_above {
            let a = g.conv(z, &format!("{net}.in"), 1, self.pad());
            h = g.tape.add(a, h);
        }
        let h = elu(g, h);
        Ok(self.heads(g, &net, h))
    }

    /// Bernoulli logits `[T*S, 1, H, W]` from `z_1..z_L` (in layer order) and the
    /// decoder context `[T, C, R, R]`.
    pub fn decode(&self, g: &mut Graph, z: &[Var], context: Var, set_size: usize) -> Result<Var> {
        if z.len() != self.config.layers {
            return Err(Error::Contract(format!("decoder needs {} latent layers, got {}", self.config.layers, z.len())));
        }
        let cfg = &self.config;
        let zcat = if z.len() == 1 { z[0] } else { g.tape.concat(z) };
        let a = g.conv(zcat, "dec.in", 1, self.pad());
        let f = self.film(g, "dec", context, set_size);
        let h = g.tape.add(a, f);
        let mut h = elu(g, h);

        let f = cfg.encoder_side() / cfg.latent_resolution;
        h = if f == 1 { g.conv(h, "dec.up", 1, 1) } else { g.conv_transpose(h, "dec.up", f, 0, 0) };
        h = self.normed(g, h, "dec.up");
        h = elu(g, h);

        let pooled_c = g.tape.spatial_mean(context);
        let sides = cfg.stage_sides();
        for i in (0..cfg.encoder_widths.len()).rev() {
            let name = format!("dec.{i}.same");
            h = g.conv(h, &name, 1, 1);
            h = self.normed(g, h, &name);
            let fc = g.conv(pooled_c, &format!("dec.{i}.film"), 1, 0);
            let fc = g.tape.group_broadcast(fc, set_size);
            let fc = g.tape.spatial_broadcast(fc, sides[i + 1], sides[i + 1]);
            h = g.tape.add(h, fc);
            h = elu(g, h);
            let name = format!("dec.{i}.up");
            let out_pad = sides[i] + 1 - 2 * sides[i + 1];
            h = g.conv_transpose(h, &name, 2, 1, out_pad);
            h = self.normed(g, h, &name);
            h = elu(g, h);
        }
        Ok(g.conv(h, "dec.out", 1, 1))
    }

    fn context_shape(&self, sets: usize) -> [usize; 4] {
        let r = self.config.latent_resolution;
        [sets, self.config.c_channels, r, r]
    }

    fn draw(g: &mut Graph, dist: &GaussianNode, noise: &mut dyn NoiseSource, kind: LatentKind, layer: usize) -> Var {
        let shape = g.tape.shape(dist.mean).to_vec();
        let rows = shape[0];
        let width = shape[1..].iter().product();
        let eps = noise.draw(NoiseSite { kind, layer, rows, width });
        dist.rsample(&mut g.tape, eps)
    }

    /// Top-down pass through the latent hierarchy.
    pub fn run(&self, g: &mut Graph, input: RunInput, noise: &mut dyn NoiseSource) -> Result<LatentState> {
        let cfg = &self.config;
        let (sets, s) = (input.sets, input.set_size);
        if sets == 0 || s == 0 {
            return Err(Error::Contract("top-down pass over an empty set".into()));
        }
        let features = match (input.source, input.features) {
            (Source::Prior, f) => f,
            (_, Some(f)) => Some(f),
            (_, None) => return Err(Error::Contract("posterior pass without features".into())),
        };
        if let Some(f) = features {
            let rows = g.tape.shape(f)[0];
            if rows != sets * s {
                return Err(Error::Contract(format!("features have {rows} rows, expected {}", sets * s)));
            }
        }
        let big_l = cfg.layers;
        let hierarchical = cfg.variant == Variant::Hfsgm && cfg.context;
        let mut c_slots: Vec<Option<Slot>> = vec![None; big_l];
        let mut z_slots: Vec<Option<Slot>> = vec![None; big_l];
        let mut context = vec![None; big_l];

        let mut c_cur = if cfg.context {
            let prior = GaussianNode::standard(&mut g.tape, &self.context_shape(sets));
            let (sample, posterior) = match input.top_context {
                Some(c) => (c, None),
                None => {
                    let posterior = match input.source {
                        Source::Posterior | Source::Mixed => Some(self.posterior_c_top(g, features.expect("checked"), s)?),
                        Source::Prior => None,
                    };
                    let from = posterior.unwrap_or(prior);
                    (Self::draw(g, &from, noise, LatentKind::Context, big_l), posterior)
                }
            };
            c_slots[big_l - 1] = Some(Slot { sample, posterior, prior });
            sample
        } else {
            g.tape.zeros(&self.context_shape(sets))
        };

        let mut z_above: Option<Var> = None;
        for l in (1..=big_l).rev() {
            if hierarchical && l < big_l {
                let za = z_above.expect("set below the top layer");
                let prior = self.prior_c(g, l, c_cur, za, s)?;
                let posterior = match input.source {
                    Source::Posterior => Some(self.posterior_c(g, l, c_cur, za, features.expect("checked"), s)?),
                    Source::Prior | Source::Mixed => None,
                };
                let sample = Self::draw(g, &posterior.unwrap_or(prior), noise, LatentKind::Context, l);
                c_slots[l - 1] = Some(Slot { sample, posterior, prior });
                c_cur = sample;
            }
            context[l - 1] = Some(c_cur);
            let prior = self.prior_z(g, l, z_above, c_cur, s)?;
            let use_posterior = match input.source {
                Source::Posterior => true,
                Source::Mixed => l == big_l,
                Source::Prior => false,
            };
            let posterior = if use_posterior {
                Some(self.posterior_z(g, l, z_above, c_cur, features.expect("checked"), s)?)
            } else {
                None
            };
            let sample = Self::draw(g, &posterior.unwrap_or(prior), noise, LatentKind::Sample, l);
            z_slots[l - 1] = Some(Slot { sample, posterior, prior });
            z_above = Some(sample);
        }

        let context: Vec<Var> = context.into_iter().map(|c| c.expect("every layer visited")).collect();
        let decoder_context = if cfg.variant == Variant::Hfsgm {
            if big_l == 1 {
                context[0]
            } else {
                g.tape.concat(&context)
            }
        } else {
            context[big_l - 1]
        };
        Ok(LatentState {
            sets,
            set_size: s,
            z: z_slots.into_iter().map(|z| z.expect("every layer visited")).collect(),
            c: c_slots,
            context,
            decoder_context,
        })
    }

    /// Full posterior pass over `images` (`sets * set_size` of them, set by set).
    pub fn infer(&self, g: &mut Graph, images: Var, sets: usize, set_size: usize, noise: &mut dyn NoiseSource) -> Result<LatentState> {
        let features = self.encode_trunk(g, images);
        self.run(
            g,
            RunInput {
                sets,
                set_size,
                features: Some(features),
                top_context: None,
                source: Source::Posterior,
            },
            noise,
        )
    }

    /// Decoder logits for a completed latent state.
    pub fn decode_state(&self, g: &mut Graph, state: &LatentState) -> Result<Var> {
        let z: Vec<Var> = state.z.iter().map(|s| s.sample).collect();
        self.decode(g, &z, state.decoder_context, state.set_size)
    }
}
