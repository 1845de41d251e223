//! Browser bindings for `index.html`. Every export takes plain numbers or a
//! JSON string and returns a JSON string; failures come back as
//! `{"error": "..."}` so the page never has to catch exceptions.

use rand::Rng;
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

use gfncp::autodiff::Tensor;
use gfncp::datagen::{mog_episode_sized, rng_from_seed, CrpConfig};
use gfncp::eval::{exact_flow_verifier, exact_posterior, FlowReport};
use gfncp::partitions::{bell, RestrictedGrowth};

/// Largest set the exact posterior is enumerated for in the page.
pub const MAX_POSTERIOR_N: usize = 9;

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct Sample {
    pub points: Vec<[f64; 2]>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct RankedPartition {
    pub labels: Vec<usize>,
    pub probability: f64,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct Posterior {
    pub partitions: u64,
    pub top: Vec<RankedPartition>,
    /// Posterior mass of the generating partition, when it was supplied.
    pub planted_probability: Option<f64>,
}

fn to_json<T: Serialize>(r: Result<T, String>) -> String {
    let value = r.and_then(|v| serde_json::to_value(v).map_err(|e| e.to_string()));
    match value {
        Ok(v) => v.to_string(),
        Err(e) => serde_json::json!({ "error": e }).to_string(),
    }
}

pub fn sample_mog(n: usize, alpha: f64, sigma: f64, seed: u64) -> Result<Sample, String> {
    let crp = CrpConfig { alpha, n_min: n, n_max: n, ..CrpConfig::default() };
    let ep = mog_episode_sized(&crp, n, sigma, &mut rng_from_seed(seed)).map_err(|e| e.to_string())?;
    let points = (0..n).map(|i| [ep.points.row(i)[0], ep.points.row(i)[1]]).collect();
    Ok(Sample { points, labels: ep.labels })
}

pub fn posterior(sample: &Sample, alpha: f64, sigma: f64, top: usize) -> Result<Posterior, String> {
    let n = sample.points.len();
    if n == 0 || n > MAX_POSTERIOR_N {
        return Err(format!("exact enumeration supports 1..={MAX_POSTERIOR_N} points, got {n}"));
    }
    let flat = sample.points.iter().flatten().copied().collect();
    let points = Tensor::matrix(n, 2, flat).map_err(|e| e.to_string())?;
    let probs = exact_posterior(&points, alpha, sigma).map_err(|e| e.to_string())?;
    let mut ranked: Vec<RankedPartition> = RestrictedGrowth::new(n)
        .zip(&probs)
        .map(|(labels, &probability)| RankedPartition { labels, probability })
        .collect();
    let planted = gfncp::partitions::canonicalize(&sample.labels);
    let planted_probability = (planted.len() == n)
        .then(|| ranked.iter().find(|r| r.labels == planted).map(|r| r.probability))
        .flatten();
    ranked.sort_by(|a, b| b.probability.total_cmp(&a.probability));
    ranked.truncate(top);
    Ok(Posterior { partitions: bell(n), top: ranked, planted_probability })
}

/// Checks the exact-flow identities for `n` points under `rewards` random
/// reward tables.
pub fn verify(n: usize, rewards: usize, seed: u64) -> Result<Vec<FlowReport>, String> {
    let mut rng = rng_from_seed(seed);
    (0..rewards)
        .map(|_| {
            let reward: Vec<f64> = (0..bell(n)).map(|_| rng.gen_range(0.01..10.0)).collect();
            exact_flow_verifier(n, &reward, &mut rng).map_err(|e| e.to_string())
        })
        .collect()
}

#[wasm_bindgen(js_name = sampleMog)]
pub fn sample_mog_js(n: usize, alpha: f64, sigma: f64, seed: u32) -> String {
    to_json(sample_mog(n, alpha, sigma, seed as u64))
}

#[wasm_bindgen(js_name = exactPosterior)]
pub fn exact_posterior_js(sample_json: &str, alpha: f64, sigma: f64, top: usize) -> String {
    let sample = serde_json::from_str::<Sample>(sample_json).map_err(|e| e.to_string());
    to_json(sample.and_then(|s| posterior(&s, alpha, sigma, top)))
}

#[wasm_bindgen(js_name = verifyFlows)]
pub fn verify_flows_js(n: usize, rewards: usize, seed: u32) -> String {
    to_json(verify(n, rewards, seed as u64))
}
