//! Permutation-invariant set pooling: mean, max and learnable attention (LAG).
//!
//! The attention pooling uses a handcrafted statistic (the set mean) as the query
//! and the set elements as keys and values. Heads split the channel axis into
//! contiguous blocks; similarity is a dot product over a head's channels and all
//! spatial positions, scaled by the square root of that size.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    Mean,
    Max,
    Lag,
}

impl std::str::FromStr for Aggregator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mean" => Ok(Self::Mean),
            "max" => Ok(Self::Max),
            "lag" => Ok(Self::Lag),
            other => Err(Error::Config(format!("unknown aggregator `{other}` (expected mean, max or lag)"))),
        }
    }
}

/// `S` element vectors of a common dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct SetEmbedding {
    elements: Vec<Vec<f64>>,
    dim: usize,
}

impl SetEmbedding {
    pub fn new(elements: Vec<Vec<f64>>) -> Result<Self> {
        contract!(!elements.is_empty(), "set embedding must contain at least one element");
        let dim = elements[0].len();
        contract!(dim > 0, "set embedding elements must be non-empty");
        contract!(elements.iter().all(|e| e.len() == dim), "set embedding elements differ in dimension");
        Ok(Self { elements, dim })
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn elements(&self) -> &[Vec<f64>] {
        &self.elements
    }

    pub fn flat(&self) -> Vec<f64> {
        self.elements.iter().flatten().copied().collect()
    }
}

/// Accumulates in canonical element order, so the result is bit-identical for any
/// ordering of the set.
pub fn mean_pool(e: &SetEmbedding) -> Vec<f64> {
    let mut out = vec![0.0; e.dim];
    for &i in &canonical_order(&e.flat(), e.len(), e.len()) {
        let el = &e.elements[i];
        out.iter_mut().zip(el).for_each(|(o, v)| *o += v);
    }
    out.iter_mut().for_each(|o| *o /= e.len() as f64);
    out
}

pub fn max_pool(e: &SetEmbedding) -> Vec<f64> {
    let mut out = e.elements[0].clone();
    for el in &e.elements[1..] {
        out.iter_mut().zip(el).for_each(|(o, v)| *o = o.max(*v));
    }
    out
}

/// Affine map `y = W x + b` with `W` stored row-major as `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: vec![0.0; input * output],
            bias: vec![0.0; output],
            input,
            output,
        }
    }

    /// Weights uniform in `[-1, 1)`, biases in `[-0.5, 0.5)`.
    pub fn random(rng: &mut impl Rng, input: usize, output: usize) -> Self {
        Self {
            weight: (0..input * output).map(|_| rng.random_range(-1.0..1.0)).collect(),
            bias: (0..output).map(|_| rng.random_range(-0.5..0.5)).collect(),
            input,
            output,
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut l = Self::zeros(dim, dim);
        (0..dim).for_each(|i| l.weight[i * dim + i] = 1.0);
        l
    }

    fn check(&self, what: &str) -> Result<()> {
        contract!(
            self.weight.len() == self.input * self.output && self.bias.len() == self.output,
            "{what}: weight/bias sizes do not match {}->{}",
            self.input,
            self.output
        );
        Ok(())
    }

    fn bind(&self, tape: &mut Tape) -> (Var, Var) {
        (
            tape.leaf(self.weight.clone(), &[self.output, self.input, 1, 1]),
            tape.leaf(self.bias.clone(), &[self.output]),
        )
    }
}

/// Query/key/value/merge projections of a multi-head attention pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct LagParams {
    pub heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub merge: Linear,
}

impl LagParams {
    pub fn zeros(dim: usize, heads: usize) -> Self {
        Self {
            heads,
            query: Linear::zeros(dim, dim),
            key: Linear::zeros(dim, dim),
            value: Linear::zeros(dim, dim),
            merge: Linear::zeros(dim, dim),
        }
    }

    pub fn random(rng: &mut impl Rng, dim: usize, heads: usize) -> Self {
        Self {
            heads,
            query: Linear::random(rng, dim, dim),
            key: Linear::random(rng, dim, dim),
            value: Linear::random(rng, dim, dim),
            merge: Linear::random(rng, dim, dim),
        }
    }

    fn check(&self, dim: usize) -> Result<()> {
        contract!(self.heads >= 1, "LAG needs at least one head");
        for (l, what) in [(&self.query, "query"), (&self.key, "key"), (&self.value, "value")] {
            l.check(what)?;
            contract!(l.input == dim, "LAG {what}: expects input dimension {}, set has {dim}", l.input);
        }
        contract!(self.query.output == self.key.output, "LAG: query and key widths differ");
        contract!(self.key.output % self.heads == 0, "LAG: width {} not divisible by {} heads", self.key.output, self.heads);
        contract!(self.value.output % self.heads == 0, "LAG: value width {} not divisible by {} heads", self.value.output, self.heads);
        self.merge.check("merge")?;
        contract!(self.merge.input == self.value.output, "LAG merge: input {} vs value width {}", self.merge.input, self.value.output);
        Ok(())
    }
}

/// Attention projections bound on a tape. Weights are 1x1 convolution kernels
/// `[out, in, 1, 1]` so the same pooling serves dense and spatial elements.
#[derive(Debug, Clone, Copy)]
pub struct LagNodes {
    pub heads: usize,
    pub query: (Var, Var),
    pub key: (Var, Var),
    pub value: (Var, Var),
    pub merge: (Var, Var),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LagOptions {
    /// Reorder each set canonically before pooling so that every accumulation runs
    /// in the same order regardless of input order.
    pub canonical_order: bool,
    /// Add the handcrafted query statistic back onto the pooled output.
    pub residual: bool,
}

impl Default for LagOptions {
    fn default() -> Self {
        Self {
            canonical_order: true,
            residual: false,
        }
    }
}

pub struct Attention {
    /// `[T, C, R, R]` pooled output.
    pub output: Var,
    /// `[T*S, heads]` attention weights in canonical row order.
    pub weights: Var,
    /// `order[i]` is the input row that landed at canonical position `i`.
    pub order: Vec<usize>,
}

/// Per-group permutation sorting rows by the bit patterns of their values.
pub fn canonical_order(values: &[f64], rows: usize, set_size: usize) -> Vec<usize> {
    let cols = if rows == 0 { 0 } else { values.len() / rows };
    let mut order: Vec<usize> = (0..rows).collect();
    for group in order.chunks_mut(set_size) {
        group.sort_by(|&a, &b| {
            let ra = values[a * cols..(a + 1) * cols].iter().map(|v| v.to_bits());
            let rb = values[b * cols..(b + 1) * cols].iter().map(|v| v.to_bits());
            ra.cmp(rb)
        });
    }
    order
}

/// Multi-head attention pooling of `elems: [T*S, C, R, R]` grouped into sets of
/// `set_size` rows.
pub fn lag_attend(tape: &mut Tape, elems: Var, set_size: usize, nodes: &LagNodes, opts: LagOptions) -> Attention {
    let rows = tape.shape(elems)[0];
    let order = if opts.canonical_order {
        canonical_order(tape.value(elems), rows, set_size)
    } else {
        (0..rows).collect()
    };
    let elems = if opts.canonical_order && order.iter().enumerate().any(|(i, &o)| i != o) {
        tape.gather(elems, &order)
    } else {
        elems
    };

    let pooled = tape.group_mean(elems, set_size);
    let q = tape.conv2d(pooled, nodes.query.0, nodes.query.1, 1, 0);
    let k = tape.conv2d(elems, nodes.key.0, nodes.key.1, 1, 0);
    let v = tape.conv2d(elems, nodes.value.0, nodes.value.1, 1, 0);

    let key_shape = tape.shape(k).to_vec();
    let per_head: usize = key_shape[1..].iter().product::<usize>() / nodes.heads;
    let qb = tape.group_broadcast(q, set_size);
    let qk = tape.mul(qb, k);
    let scores = tape.head_sum(qk, nodes.heads);
    let scores = tape.scale(scores, 1.0 / (per_head as f64).sqrt());
    let weights = tape.group_softmax(scores, set_size);

    let value_shape = tape.shape(v).to_vec();
    let expanded = tape.head_expand(weights, &value_shape);
    let weighted = tape.mul(expanded, v);
    let summed = tape.group_sum(weighted, set_size);
    let mut output = tape.conv2d(summed, nodes.merge.0, nodes.merge.1, 1, 0);
    if opts.residual {
        output = tape.add(output, pooled);
    }
    Attention { output, weights, order }
}

/// Result of a value-level attention pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct LagOutput {
    pub output: Vec<f64>,
    /// `weights[s][h]`: weight of input element `s` (input order) in head `h`.
    pub weights: Vec<Vec<f64>>,
}

pub fn lag_pool(e: &SetEmbedding, params: &LagParams) -> Result<LagOutput> {
    lag_pool_with(e, params, LagOptions::default())
}

pub fn lag_pool_with(e: &SetEmbedding, params: &LagParams, opts: LagOptions) -> Result<LagOutput> {
    params.check(e.dim)?;
    let mut tape = Tape::new();
    let elems = tape.leaf(e.flat(), &[e.len(), e.dim, 1, 1]);
    let nodes = LagNodes {
        heads: params.heads,
        query: params.query.bind(&mut tape),
        key: params.key.bind(&mut tape),
        value: params.value.bind(&mut tape),
        merge: params.merge.bind(&mut tape),
    };
    let att = lag_attend(&mut tape, elems, e.len(), &nodes, opts);
    let w = tape.value(att.weights);
    let mut weights = vec![Vec::new(); e.len()];
    for (pos, &src) in att.order.iter().enumerate() {
        weights[src] = w[pos * params.heads..(pos + 1) * params.heads].to_vec();
    }
    Ok(LagOutput {
        output: tape.value(att.output).to_vec(),
        weights,
    })
}

/// Attention pooling over fused elements `elu(F [h_s; z_s; c] + b)`, where the set
/// latent `c` is broadcast to every element.
pub fn lag_pool_hierarchical(h: &SetEmbedding, z: &SetEmbedding, c: &[f64], fusion: &Linear, params: &LagParams) -> Result<LagOutput> {
    contract!(h.len() == z.len(), "hierarchical LAG: {} embeddings vs {} latents", h.len(), z.len());
    fusion.check("fusion")?;
    let width = h.dim + z.dim + c.len();
    contract!(fusion.input == width, "hierarchical LAG: fusion expects {} inputs, got {width}", fusion.input);
    let fused = h
        .elements
        .iter()
        .zip(&z.elements)
        .map(|(hs, zs)| {
            let input: Vec<f64> = hs.iter().chain(zs).chain(c).copied().collect();
            (0..fusion.output)
                .map(|o| {
                    let row = &fusion.weight[o * width..(o + 1) * width];
                    let pre = fusion.bias[o] + row.iter().zip(&input).map(|(w, x)| w * x).sum::<f64>();
                    if pre > 0.0 {
                        pre
                    } else {
                        pre.exp_m1()
                    }
                })
                .collect()
        })
        .collect();
    lag_pool(&SetEmbedding::new(fused)?, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn random_linear(rng: &mut crate::rng::SeededRng, input: usize, output: usize) -> Linear {
        Linear::random(rng, input, output)
    }

    fn random_params(rng: &mut crate::rng::SeededRng, dim: usize, heads: usize) -> LagParams {
        LagParams::random(rng, dim, heads)
    }

    #[test]
    fn mean_and_max_examples() {
        let single = SetEmbedding::new(vec![vec![0.5, -2.0]]).unwrap();
        assert_eq!(mean_pool(&single), vec![0.5, -2.0]);
        assert_eq!(max_pool(&single), vec![0.5, -2.0]);
        let e = SetEmbedding::new(vec![vec![1.0, 0.0], vec![3.0, 2.0]]).unwrap();
        assert_eq!(mean_pool(&e), vec![2.0, 1.0]);
        let e = SetEmbedding::new(vec![vec![1.0, 5.0], vec![3.0, 2.0]]).unwrap();
        assert_eq!(max_pool(&e), vec![3.0, 5.0]);
        let dup = SetEmbedding::new(vec![vec![1.0, 5.0], vec![3.0, 2.0], vec![3.0, 2.0], vec![1.0, 5.0]]).unwrap();
        assert_eq!(max_pool(&dup), max_pool(&e));
    }

    #[test]
    fn empty_sets_are_rejected() {
        assert!(SetEmbedding::new(vec![]).is_err());
        assert!(SetEmbedding::new(vec![vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn lag_hand_evaluated_softmax() {
        let params = LagParams {
            heads: 1,
            query: Linear::identity(1),
            key: Linear::identity(1),
            value: Linear::identity(1),
            merge: Linear::identity(1),
        };
        let e = SetEmbedding::new(vec![vec![1.0], vec![3.0]]).unwrap();
        let out = lag_pool(&e, &params).unwrap();
        let (e2, e6) = (2f64.exp(), 6f64.exp());
        let a = [e2 / (e2 + e6), e6 / (e2 + e6)];
        assert!((out.weights[0][0] - a[0]).abs() < 1e-15);
        assert!((out.weights[1][0] - a[1]).abs() < 1e-15);
        assert!((a[0] - 0.01799).abs() < 1e-5 && (a[1] - 0.98201).abs() < 1e-5);
        let expected = a[0] * 1.0 + a[1] * 3.0;
        assert!((out.output[0] - expected).abs() < 1e-12);
        assert!((out.output[0] - 2.96402).abs() < 1e-5);
    }

    #[test]
    fn lag_singleton_and_identical_elements() {
        let mut rng = seeded(1);
        let params = random_params(&mut rng, 4, 2);
        let x = vec![0.3, -0.1, 0.8, 1.2];
        let single = lag_pool(&SetEmbedding::new(vec![x.clone()]).unwrap(), &params).unwrap();
        assert_eq!(single.weights[0], vec![1.0, 1.0]);
        // merge(value(x)) evaluated by hand
        let v: Vec<f64> = (0..4)
            .map(|o| params.value.bias[o] + (0..4).map(|i| params.value.weight[o * 4 + i] * x[i]).sum::<f64>())
            .collect();
        for o in 0..4 {
            let m = params.merge.bias[o] + (0..4).map(|i| params.merge.weight[o * 4 + i] * v[i]).sum::<f64>();
            assert!((single.output[o] - m).abs() < 1e-12);
        }
        let same = lag_pool(&SetEmbedding::new(vec![x.clone(); 5]).unwrap(), &params).unwrap();
        for w in &same.weights {
            for &a in w {
                assert!((a - 0.2).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn lag_rejects_bad_dimensions() {
        let params = LagParams::zeros(3, 1);
        let e = SetEmbedding::new(vec![vec![1.0, 2.0]]).unwrap();
        assert!(lag_pool(&e, &params).is_err());
        let params = LagParams::zeros(3, 2);
        let e = SetEmbedding::new(vec![vec![1.0, 2.0, 3.0]]).unwrap();
        assert!(lag_pool(&e, &params).is_err());
    }

    #[test]
    fn hierarchical_examples() {
        let mut rng = seeded(2);
        let params = random_params(&mut rng, 3, 1);
        let fusion = random_linear(&mut rng, 2 + 1 + 2, 3);
        let h = SetEmbedding::new(vec![vec![0.2, 0.4], vec![-1.0, 0.3], vec![0.0, 0.9]]).unwrap();
        let z = SetEmbedding::new(vec![vec![1.0], vec![-0.5], vec![0.25]]).unwrap();
        let c = [0.7, -0.2];
        let base = lag_pool_hierarchical(&h, &z, &c, &fusion, &params).unwrap();
        let perm = [2usize, 0, 1];
        let hp = SetEmbedding::new(perm.iter().map(|&i| h.elements()[i].clone()).collect()).unwrap();
        let zp = SetEmbedding::new(perm.iter().map(|&i| z.elements()[i].clone()).collect()).unwrap();
        let permuted = lag_pool_hierarchical(&hp, &zp, &c, &fusion, &params).unwrap();
        assert_eq!(base.output, permuted.output);

        let zero = lag_pool_hierarchical(&h, &z, &c, &Linear::zeros(5, 3), &LagParams::zeros(3, 1)).unwrap();
        assert!(zero.output.iter().all(|&v| v == 0.0));

        let short = SetEmbedding::new(vec![vec![1.0]]).unwrap();
        assert!(lag_pool_hierarchical(&h, &short, &c, &fusion, &params).is_err());

        let h1 = SetEmbedding::new(vec![vec![0.2, 0.4]]).unwrap();
        let z1 = SetEmbedding::new(vec![vec![1.0]]).unwrap();
        let one = lag_pool_hierarchical(&h1, &z1, &c, &fusion, &params).unwrap();
        assert_eq!(one.weights, vec![vec![1.0]]);
    }

    #[test]
    fn permutation_invariance_randomized() {
        let mut rng = seeded(3);
        for trial in 0..40 {
            let s = 1 + trial % 10;
            let heads = [1usize, 2, 4][trial % 3];
            let dim = heads * (1 + trial % 2);
            let params = random_params(&mut rng, dim, heads);
            let elements: Vec<Vec<f64>> = (0..s).map(|_| (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
            let e = SetEmbedding::new(elements.clone()).unwrap();
            let (m0, x0, l0) = (mean_pool(&e), max_pool(&e), lag_pool(&e, &params).unwrap());
            for _ in 0..10 {
                let mut p = elements.clone();
                p.shuffle(&mut rng);
                let ep = SetEmbedding::new(p).unwrap();
                assert_eq!(lag_pool(&ep, &params).unwrap().output, l0.output);
                assert_eq!(max_pool(&ep), x0);
                for (a, b) in mean_pool(&ep).iter().zip(&m0) {
                    assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
                }
            }
            for h in 0..heads {
                let total: f64 = l0.weights.iter().map(|w| w[h]).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }
}
