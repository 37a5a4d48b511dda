//! WebAssembly bindings for the static demo page in `www/`. Every entry point
//! takes plain numbers and returns a JSON string.

use hfsgm::aggregation::{lag_pool, mean_pool, LagParams, SetEmbedding};
use hfsgm::evaluation::log_mean_exp;
use hfsgm::oracle::{exact_log_marginal, exact_predictive, fit_mean_field, importance_log_weights, mean_field_elbo, LinearGaussianInstance};
use hfsgm::rng::seeded;
use hfsgm::sampling::refine;
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Debug, Serialize)]
pub struct AttentionView {
    /// `weights[s][h]`, in input order.
    pub weights: Vec<Vec<f64>>,
    pub output: Vec<f64>,
    pub mean: Vec<f64>,
    /// Output after reversing the set, compared bit for bit.
    pub reversed_identical: bool,
}

/// LAG pooling of `values` (row-major, `dim` columns) with random projections.
pub fn attention(values: &[f64], dim: usize, heads: usize, seed: u64) -> Result<AttentionView, String> {
    if dim == 0 || values.is_empty() || values.len() % dim != 0 {
        return Err(format!("{} values do not form rows of width {dim}", values.len()));
    }
    if heads == 0 || dim % heads != 0 {
        return Err(format!("width {dim} is not divisible into {heads} heads"));
    }
    let rows: Vec<Vec<f64>> = values.chunks(dim).map(<[f64]>::to_vec).collect();
    let set = SetEmbedding::new(rows.clone()).map_err(|e| e.to_string())?;
    let params = LagParams::random(&mut seeded(seed), dim, heads);
    let out = lag_pool(&set, &params).map_err(|e| e.to_string())?;
    let reversed = SetEmbedding::new(rows.into_iter().rev().collect()).map_err(|e| e.to_string())?;
    let again = lag_pool(&reversed, &params).map_err(|e| e.to_string())?;
    Ok(AttentionView {
        reversed_identical: again.output == out.output,
        mean: mean_pool(&set),
        weights: out.weights,
        output: out.output,
    })
}

#[derive(Debug, Serialize)]
pub struct ChainView {
    pub exact_mean: f64,
    pub exact_var: f64,
    pub mean: f64,
    pub var: f64,
    /// Final states of every chain.
    pub finals: Vec<f64>,
    /// The first chain, step by step.
    pub trajectory: Vec<f64>,
}

fn instance(var_c: f64, var_z: f64, var_x: f64, observations: &[f64]) -> Result<LinearGaussianInstance, String> {
    if observations.is_empty() {
        return Err("enter at least one observation".into());
    }
    LinearGaussianInstance::new(var_c, var_z, var_x, observations.to_vec()).map_err(|e| e.to_string())
}

/// Independent refinement chains on the linear-Gaussian model.
pub fn chains(var_c: f64, var_z: f64, var_x: f64, observations: &[f64], count: usize, iters: usize, seed: u64) -> Result<ChainView, String> {
    let inst = instance(var_c, var_z, var_x, observations)?;
    if count < 2 {
        return Err("run at least two chains".into());
    }
    let model = inst.model();
    let mut rng = seeded(seed);
    let mut finals = Vec::with_capacity(count);
    let mut trajectory = Vec::new();
    for k in 0..count {
        let t = refine(&model, observations, iters, &mut rng).map_err(|e| e.to_string())?;
        finals.push(*t.last().expect("nonempty"));
        if k == 0 {
            trajectory = t;
        }
    }
    let n = count as f64;
    let mean = finals.iter().sum::<f64>() / n;
    let var = finals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let (exact_mean, exact_var) = exact_predictive(&inst);
    Ok(ChainView {
        exact_mean,
        exact_var,
        mean,
        var,
        finals,
        trajectory,
    })
}

#[derive(Debug, Serialize)]
pub struct BoundView {
    pub exact: f64,
    pub elbo: f64,
    /// `(IS, estimate)` pairs, each averaged over repeated runs.
    pub estimates: Vec<(usize, f64)>,
}

const REPEATS: usize = 25;

/// Importance-weighted estimates of `log p(X)` with a fitted mean-field proposal.
pub fn bounds(var_c: f64, var_z: f64, var_x: f64, observations: &[f64], seed: u64) -> Result<BoundView, String> {
    let inst = instance(var_c, var_z, var_x, observations)?;
    let q = fit_mean_field(&inst, 2000, 0.02);
    let mut rng = seeded(seed);
    let estimates = [1, 3, 10, 30, 100, 300, 1000]
        .into_iter()
        .map(|n| {
            let total: f64 = (0..REPEATS).map(|_| log_mean_exp(&importance_log_weights(&inst, &q, n, &mut rng))).sum();
            (n, total / REPEATS as f64)
        })
        .collect();
    Ok(BoundView {
        exact: exact_log_marginal(&inst),
        elbo: mean_field_elbo(&inst, &q),
        estimates,
    })
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsValue> {
    r.map(|v| serde_json::to_string(&v).expect("serializable")).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = lagAttention)]
pub fn lag_attention_js(values: &[f64], dim: usize, heads: usize, seed: u32) -> Result<String, JsValue> {
    to_js(attention(values, dim, heads, seed as u64))
}

#[wasm_bindgen(js_name = refineChains)]
pub fn refine_chains_js(var_c: f64, var_z: f64, var_x: f64, observations: &[f64], count: usize, iters: usize, seed: u32) -> Result<String, JsValue> {
    to_js(chains(var_c, var_z, var_x, observations, count, iters, seed as u64))
}

#[wasm_bindgen(js_name = importanceBounds)]
pub fn importance_bounds_js(var_c: f64, var_z: f64, var_x: f64, observations: &[f64], seed: u32) -> Result<String, JsValue> {
    to_js(bounds(var_c, var_z, var_x, observations, seed as u64))
}
