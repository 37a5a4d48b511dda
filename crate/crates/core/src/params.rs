//! Named parameter arrays and their binding onto a tape.

use std::collections::BTreeMap;

use crate::tape::{Gradients, Tape, Var};

/// Running-statistics momentum for batch norm.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    /// Buffers such as batch-norm running statistics are not trained.
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Parameters {
    tensors: BTreeMap<String, ParamTensor>,
}

impl Parameters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f64>, trainable: bool) {
        let name = name.into();
        assert_eq!(data.len(), shape.iter().product::<usize>(), "parameter {name}: data/shape mismatch");
        self.tensors.insert(
            name,
            ParamTensor {
                shape: shape.to_vec(),
                data,
                trainable,
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamTensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamTensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ParamTensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.tensors.iter().filter(|(_, t)| t.trainable).map(|(n, _)| n.clone()).collect()
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.tensors.values().filter(|t| t.trainable).map(|t| t.data.len()).sum()
    }

    /// Folds batch statistics into the running buffers.
    pub fn apply_running_updates(&mut self, updates: &[(String, Vec<f64>, Vec<f64>)]) {
        for (prefix, mean, var) in updates {
            for (suffix, batch) in [("running_mean", mean), ("running_var", var)] {
                let t = self.get_mut(&format!("{prefix}.{suffix}")).expect("batch-norm buffer exists");
                for (r, b) in t.data.iter_mut().zip(batch) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                }
            }
        }
    }
}

/// A tape plus the parameters bound onto it so far.
pub struct Graph<'p> {
    pub tape: Tape,
    params: &'p Parameters,
    bound: BTreeMap<String, Var>,
    /// Training mode uses batch statistics in batch norm; otherwise running statistics.
    pub training: bool,
    batch_norms: Vec<(String, Var)>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p Parameters, training: bool) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: BTreeMap::new(),
            training,
            batch_norms: Vec::new(),
        }
    }

    /// Binds (once) and returns the named parameter.
    pub fn param(&mut self, name: &str) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let t = self.params.get(name).unwrap_or_else(|| panic!("missing parameter {name}"));
        let v = self.tape.leaf(t.data.clone(), &t.shape);
        self.bound.insert(name.to_string(), v);
        v
    }

    pub fn conv(&mut self, x: Var, prefix: &str, stride: usize, pad: usize) -> Var {
        let w = self.param(&format!("{prefix}.w"));
        let b = self.param(&format!("{prefix}.b"));
        self.tape.conv2d(x, w, b, stride, pad)
    }

    pub fn conv_transpose(&mut self, x: Var, prefix: &str, stride: usize, pad: usize, out_pad: usize) -> Var {
        let w = self.param(&format!("{prefix}.w"));
        let b = self.param(&format!("{prefix}.b"));
        self.tape.conv_transpose2d(x, w, b, stride, pad, out_pad)
    }

    pub fn batch_norm(&mut self, x: Var, prefix: &str) -> Var {
        let gamma = self.param(&format!("{prefix}.gamma"));
        let beta = self.param(&format!("{prefix}.beta"));
        if self.training {
            let out = self.tape.batch_norm(x, gamma, beta, None);
            self.batch_norms.push((prefix.to_string(), out));
            out
        } else {
            let params = self.params;
            let mean = &params.get(&format!("{prefix}.running_mean")).expect("running mean").data;
            let var = &params.get(&format!("{prefix}.running_var")).expect("running var").data;
            self.tape.batch_norm(x, gamma, beta, Some((mean, var)))
        }
    }

    /// Batch statistics of every training-mode batch norm, as `(prefix, mean, var)`.
    pub fn running_updates(&self) -> Vec<(String, Vec<f64>, Vec<f64>)> {
        self.batch_norms
            .iter()
            .filter_map(|(prefix, v)| self.tape.batch_stats(*v).map(|s| (prefix.clone(), s.mean, s.var)))
            .collect()
    }

    pub fn bound(&self) -> &BTreeMap<String, Var> {
        &self.bound
    }

    /// Gradients of trainable bound parameters, keyed by name.
    pub fn parameter_gradients(&self, grads: &Gradients) -> BTreeMap<String, Vec<f64>> {
        self.bound
            .iter()
            .filter(|(name, _)| self.params.get(name).is_some_and(|t| t.trainable))
            .filter_map(|(name, &v)| grads.get(v).map(|g| (name.clone(), g.to_vec())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binding_is_shared_and_gradients_are_named() {
        let mut p = Parameters::new();
        p.insert("a", &[2], vec![1.0, 2.0], true);
        p.insert("buf", &[2], vec![0.0, 0.0], false);
        let mut g = Graph::new(&p, true);
        let a1 = g.param("a");
        let a2 = g.param("a");
        assert_eq!(a1, a2);
        let buf = g.param("buf");
        let prod = g.tape.mul(a1, buf);
        let sq = g.tape.mul(a1, a1);
        let sum = g.tape.add(sq, prod);
        let loss = g.tape.sum_all(sum);
        let grads = g.tape.backward(loss);
        let named = g.parameter_gradients(&grads);
        assert_eq!(named.len(), 1);
        assert_eq!(named["a"], vec![2.0, 4.0]);
    }

    #[test]
    fn running_statistics_move_toward_the_batch() {
        let mut p = Parameters::new();
        p.insert("bn.gamma", &[1], vec![1.0], true);
        p.insert("bn.beta", &[1], vec![0.0], true);
        p.insert("bn.running_mean", &[1], vec![0.0], false);
        p.insert("bn.running_var", &[1], vec![1.0], false);
        let updates = {
            let mut g = Graph::new(&p, true);
            let x = g.tape.leaf(vec![1.0, 3.0], &[2, 1]);
            g.batch_norm(x, "bn");
            g.running_updates()
        };
        p.apply_running_updates(&updates);
        assert!((p.get("bn.running_mean").unwrap().data[0] - 0.2).abs() < 1e-12);
        assert!((p.get("bn.running_var").unwrap().data[0] - 1.0).abs() < 1e-9);
    }
}
