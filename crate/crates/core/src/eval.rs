//! Clustering metrics, order-consistency metrics, enumeration oracles and
//! the exact-flow verifier.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::datagen::{rng_from_seed, split_seed, Episode};
use crate::error::{Error, Result};
use crate::flows::{trajectory_logprob, Policy};
use crate::losses::{mc_from_shifted, mc_value};
use crate::model::{ModelParams, StepLayout};
use crate::partitions::{canonicalize, cluster_sizes, num_clusters, reorder, to_point_order, RestrictedGrowth};

/// Largest set size the partition enumerators accept.
pub const MAX_ENUM_N: usize = 10;
/// Largest set size for the exact-flow verifier.
pub const MAX_VERIFY_N: usize = 8;

fn check_lengths(a: &[usize], b: &[usize]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Labels(format!("labelings have lengths {} and {}", a.len(), b.len())));
    }
    Ok(())
}

fn contingency(a: &[usize], b: &[usize]) -> (Vec<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let (a, b) = (canonicalize(a), canonicalize(b));
    let (ka, kb) = (num_clusters(&a), num_clusters(&b));
    let mut table = vec![vec![0.0; kb]; ka];
    for (&i, &j) in a.iter().zip(&b) {
        table[i][j] += 1.0;
    }
    let rows = table.iter().map(|r| r.iter().sum()).collect();
    let cols = (0..kb).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    (table, rows, cols)
}

fn entropy(counts: &[f64], n: f64) -> f64 {
    counts.iter().filter(|&&c| c > 0.0).map(|&c| -(c / n) * (c / n).ln()).sum()
}

/// Mutual information normalized by the arithmetic mean of the entropies.
/// Two zero-entropy labelings score 1, exactly one scores 0.
pub fn nmi(a: &[usize], b: &[usize]) -> Result<f64> {
    check_lengths(a, b)?;
    if a.is_empty() {
        return Err(Error::Labels("empty labelings".into()));
    }
    let n = a.len() as f64;
    let (table, rows, cols) = contingency(a, b);
    let (ha, hb) = (entropy(&rows, n), entropy(&cols, n));
    match (ha == 0.0, hb == 0.0) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let mut mi = 0.0;
    for (i, row) in table.iter().enumerate() {
        for (j, &nij) in row.iter().enumerate() {
            if nij > 0.0 {
                mi += nij / n * (n * nij / (rows[i] * cols[j])).ln();
            }
        }
    }
    Ok((mi / (0.5 * (ha + hb))).clamp(0.0, 1.0))
}

/// Adjusted Rand index (pair counting with the expected-index correction).
pub fn ari(a: &[usize], b: &[usize]) -> Result<f64> {
    check_lengths(a, b)?;
    if a.len() < 2 {
        return Err(Error::Labels("ARI needs at least two points".into()));
    }
    let pairs = |x: f64| x * (x - 1.0) / 2.0;
    let (table, rows, cols) = contingency(a, b);
    let index: f64 = table.iter().flatten().map(|&v| pairs(v)).sum();
    let sa: f64 = rows.iter().map(|&v| pairs(v)).sum();
    let sb: f64 = cols.iter().map(|&v| pairs(v)).sum();
    let expected = sa * sb / pairs(a.len() as f64);
    let max = 0.5 * (sa + sb);
    if max == expected {
        // Both labelings are all-singletons or all-one-cluster.
        return Ok(if index == max { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / (max - expected))
}

/// Mean `mc_loss` over episodes, each visited in its stored point order.
pub fn mc_metric(params: &ModelParams, episodes: &[Episode]) -> Result<f64> {
    if episodes.is_empty() {
        return Err(Error::Config("mc_metric needs at least one episode".into()));
    }
    let mut sum = 0.0;
    for ep in episodes {
        let order: Vec<usize> = (0..ep.len()).collect();
        sum += mc_value(params, &ep.points, &order, &ep.labels)?;
    }
    Ok(sum / episodes.len() as f64)
}

/// Population standard deviation over mean of `exp(log_probs)`, evaluated
/// after shifting by the maximum log probability.
pub fn sdpp_from_log_probs(log_probs: &[f64]) -> Result<f64> {
    if log_probs.len() < 2 {
        return Err(Error::Config("SDPP needs at least two permutations".into()));
    }
    let max = log_probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Numerical("all permutation probabilities underflow".into()));
    }
    let p: Vec<f64> = log_probs.iter().map(|lp| (lp - max).exp()).collect();
    let n = p.len() as f64;
    let mean = p.iter().sum::<f64>() / n;
    let var = p.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(var.sqrt() / mean)
}

/// SDPP of the planted assignment over `num_perms` uniformly drawn orders
/// (with replacement).
pub fn sdpp<R: Rng + ?Sized>(params: &ModelParams, episode: &Episode, num_perms: usize, rng: &mut R) -> Result<f64> {
    let n = episode.len();
    let mut lps = Vec::with_capacity(num_perms);
    for _ in 0..num_perms {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let visited = reorder(&episode.labels, &order);
        lps.push(trajectory_logprob(params, &episode.points, &visited, &order, false)?);
    }
    sdpp_from_log_probs(&lps)
}

/// Probabilities of every partition of `N` points, indexed like
/// [`RestrictedGrowth::new(N)`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionTable {
    pub partitions: Vec<Vec<usize>>,
    pub exact: Vec<f64>,
    /// Model probability of each canonical sequence under the identity order.
    pub model_raw: Vec<f64>,
    pub model_normalized: Vec<f64>,
}

impl PartitionTable {
    pub fn total_variation(&self) -> f64 {
        total_variation(&self.exact, &self.model_normalized)
    }
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

fn check_enum(n: usize) -> Result<()> {
    if n > MAX_ENUM_N {
        return Err(Error::Enumeration { n, max: MAX_ENUM_N });
    }
    Ok(())
}

/// Log marginal likelihood of a cluster's points under `mu ~ N(0, sigma^2 I)`
/// and unit observation noise, one dimension at a time.
fn log_cluster_marginal(points: &Tensor, members: &[usize], sigma: f64) -> f64 {
    let s2 = sigma * sigma;
    let n = members.len() as f64;
    let mut out = 0.0;
    for d in 0..points.cols() {
        let (mut sum, mut sq) = (0.0, 0.0);
        for &i in members {
            let y = points.row(i)[d];
            sum += y;
            sq += y * y;
        }
        let denom = 1.0 + n * s2;
        out += -0.5 * n * (2.0 * std::f64::consts::PI).ln() - 0.5 * denom.ln() - 0.5 * (sq - s2 * sum * sum / denom);
    }
    out
}

/// Exact posterior over partitions under a CRP(`alpha`) prior with Gaussian
/// clusters (`mu_k ~ N(0, sigma^2 I)`, points `~ N(mu_k, I)`).
pub fn exact_posterior(points: &Tensor, alpha: f64, sigma: f64) -> Result<Vec<f64>> {
    let n = points.rows();
    check_enum(n)?;
    if alpha <= 0.0 || sigma <= 0.0 {
        return Err(Error::Config("alpha and sigma must be positive".into()));
    }
    let ln_fact = |k: usize| (2..=k).map(|i| (i as f64).ln()).sum::<f64>();
    let logs: Vec<f64> = RestrictedGrowth::new(n)
        .map(|c| {
            let sizes = cluster_sizes(&c);
            let mut lp = sizes.len() as f64 * alpha.ln() + sizes.iter().map(|&s| ln_fact(s - 1)).sum::<f64>();
            for k in 0..sizes.len() {
                let members: Vec<usize> = (0..n).filter(|&i| c[i] == k).collect();
                lp += log_cluster_marginal(points, &members, sigma);
            }
            lp
        })
        .collect();
    Ok(normalize_logs(&logs))
}

fn normalize_logs(logs: &[f64]) -> Vec<f64> {
    let lse = crate::autodiff::logsumexp(logs);
    logs.iter().map(|l| (l - lse).exp()).collect()
}

/// Model probability of every canonical label sequence under the identity
/// order (sequential factorization), in [`RestrictedGrowth`] order.
pub fn model_posterior_enum(params: &ModelParams, points: &Tensor) -> Result<Vec<f64>> {
    let n = points.rows();
    check_enum(n)?;
    let policy = Policy::new(params, points)?;
    let mut out = Vec::new();
    if n == 0 {
        return Ok(out);
    }
    let root = policy.start((0..n).collect())?;
    // Depth-first in increasing label order reproduces the lexicographic
    // enumeration.
    let mut stack = vec![(root, 0.0f64)];
    while let Some((state, lp)) = stack.pop() {
        if state.is_complete() {
            out.push(lp.exp());
            continue;
        }
        let step = policy.forward_log_probs(&state)?;
        for j in (0..step.len()).rev() {
            let mut child = state.clone();
            policy.assign(&mut child, j)?;
            stack.push((child, lp + step[j]));
        }
    }
    Ok(out)
}

pub fn partition_table(params: &ModelParams, points: &Tensor, alpha: f64, sigma: f64) -> Result<PartitionTable> {
    let exact = exact_posterior(points, alpha, sigma)?;
    let model_raw = model_posterior_enum(params, points)?;
    let total: f64 = model_raw.iter().sum();
    let model_normalized = model_raw.iter().map(|p| p / total).collect();
    Ok(PartitionTable { partitions: RestrictedGrowth::new(points.rows()).collect(), exact, model_raw, model_normalized })
}

/// Outcome of [`exact_flow_verifier`]; every error is a maximum absolute
/// deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowReport {
    pub n: usize,
    /// Largest `mc_loss` of the flow-induced `Ê` over all terminal
    /// trajectories of the checked orders.
    pub mc_error: f64,
    /// Spread of the log probability of one terminal across all orders.
    pub order_error: f64,
    /// Largest `|P(reach x) - R(x) / Z|` per checked order.
    pub reach_error: f64,
    /// SDPP of the pinned terminal across all orders.
    pub sdpp: f64,
    pub orders_checked: usize,
}

impl FlowReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.mc_error <= tol && self.order_error <= tol && self.reach_error <= tol
    }
}

/// State flows `F[prefix]` (sum of normalized rewards of all completions) for
/// one visiting order, keyed by the prefix labels.
fn flows_for_order(n: usize, order: &[usize], reward: &[f64], index: &HashMap<Vec<usize>, usize>) -> HashMap<Vec<usize>, f64> {
    fn visit(
        prefix: &mut Vec<usize>,
        k: usize,
        n: usize,
        order: &[usize],
        reward: &[f64],
        index: &HashMap<Vec<usize>, usize>,
        out: &mut HashMap<Vec<usize>, f64>,
    ) -> f64 {
        let f = if prefix.len() == n {
            reward[index[&to_point_order(prefix, order)]]
        } else {
            let mut sum = 0.0;
            for j in 0..=k {
                prefix.push(j);
                sum += visit(prefix, k.max(j + 1), n, order, reward, index, out);
                prefix.pop();
            }
            sum
        };
        out.insert(prefix.clone(), f);
        f
    }
    let mut out = HashMap::new();
    visit(&mut vec![0], 1, n, order, reward, index, &mut out);
    out
}

/// Log probability of each step of `labels` under the flow policy
/// `P(child) = F[child] / F[parent]`.
fn flow_log_prob(flows: &HashMap<Vec<usize>, f64>, labels: &[usize]) -> f64 {
    (2..=labels.len()).map(|m| (flows[&labels[..m]] / flows[&labels[..m - 1]]).ln()).sum()
}

/// `mc_loss` of the shifted energies `Ê = -ln F` along `labels`.
fn flow_mc(flows: &HashMap<Vec<usize>, f64>, labels: &[usize]) -> Result<f64> {
    let layout = StepLayout::from_labels(labels)?;
    let mut hat = vec![0.0; layout.num_rows()];
    for step in 0..layout.num_steps() {
        for (j, row) in layout.step_rows(step).enumerate() {
            let mut child = labels[..step].to_vec();
            child.push(j);
            hat[row] = -flows[&child].ln();
        }
    }
    let tape = Tape::new();
    let hat = tape.constant(Tensor::matrix(hat.len(), 1, hat)?);
    Ok(mc_from_shifted(hat, &layout)?.0.item())
}

/// Builds exact flows for a reward over the partitions of `N` points (in
/// [`RestrictedGrowth`] order) and checks that (a) the induced `mc_loss`
/// vanishes, (b) one terminal has the same trajectory probability under
/// every order, and (c) terminals are reached in proportion to reward.
/// Rewards are normalized so the root flow is 1.
pub fn exact_flow_verifier<R: Rng + ?Sized>(n: usize, reward: &[f64], rng: &mut R) -> Result<FlowReport> {
    if n > MAX_VERIFY_N {
        return Err(Error::Enumeration { n, max: MAX_VERIFY_N });
    }
    if n == 0 {
        return Err(Error::Config("verifier needs at least one point".into()));
    }
    let partitions: Vec<Vec<usize>> = RestrictedGrowth::new(n).collect();
    if reward.len() != partitions.len() {
        return Err(Error::Config(format!("{} rewards for {} partitions", reward.len(), partitions.len())));
    }
    if reward.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
        return Err(Error::Config("rewards must be positive and finite".into()));
    }
    let z: f64 = reward.iter().sum();
    let reward: Vec<f64> = reward.iter().map(|r| r / z).collect();
    let index: HashMap<Vec<usize>, usize> = partitions.iter().cloned().enumerate().map(|(i, p)| (p, i)).collect();

    let pinned = &partitions[rng.gen_range(0..partitions.len())];
    let mut random_order: Vec<usize> = (0..n).collect();
    random_order.shuffle(rng);
    let identity: Vec<usize> = (0..n).collect();

    let mut report = FlowReport { n, mc_error: 0.0, order_error: 0.0, reach_error: 0.0, sdpp: 0.0, orders_checked: 0 };
    let mut pinned_lps = Vec::new();
    for order in permutations(n) {
        let flows = flows_for_order(n, &order, &reward, &index);
        pinned_lps.push(flow_log_prob(&flows, &reorder(pinned, &order)));
        if order == identity || order == random_order {
            for (i, p) in partitions.iter().enumerate() {
                let visited = reorder(p, &order);
                report.mc_error = report.mc_error.max(flow_mc(&flows, &visited)?.abs());
                let reach = flow_log_prob(&flows, &visited).exp();
                report.reach_error = report.reach_error.max((reach - reward[i]).abs());
            }
        }
        report.orders_checked += 1;
    }
    let (lo, hi) = pinned_lps.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    report.order_error = hi - lo;
    report.sdpp = if pinned_lps.len() >= 2 { sdpp_from_log_probs(&pinned_lps)? } else { 0.0 };
    Ok(report)
}

/// All permutations of `0..n` (Heap's algorithm).
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut a: Vec<usize> = (0..n).collect();
    let mut out = vec![a.clone()];
    let mut c = vec![0; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                a.swap(0, i);
            } else {
                a.swap(c[i], i);
            }
            out.push(a.clone());
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    out
}

/// Greedy decoding of an episode in its stored point order; returns labels
/// per point.
pub fn greedy_labels(params: &ModelParams, episode: &Episode) -> Result<Vec<usize>> {
    let policy = Policy::new(params, &episode.points)?;
    Ok(policy.greedy_decode((0..episode.len()).collect())?.labels_by_point())
}

/// Mean NMI/ARI of the `top_k` most probable distinct assignments among
/// `num_samples` policy samples (stored point order).
pub fn avg_score_eval<R: Rng + ?Sized>(
    params: &ModelParams,
    episode: &Episode,
    num_samples: usize,
    top_k: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    if top_k == 0 || num_samples < top_k {
        return Err(Error::Config("need num_samples >= top_k >= 1".into()));
    }
    let policy = Policy::new(params, &episode.points)?;
    let order: Vec<usize> = (0..episode.len()).collect();
    let mut seen: HashMap<Vec<usize>, f64> = HashMap::new();
    for _ in 0..num_samples {
        let t = policy.sample_trajectory(rng, Some(order.clone()))?;
        seen.insert(t.labels_by_point(), t.log_prob);
    }
    let mut ranked: Vec<(Vec<usize>, f64)> = seen.into_iter().collect();
    // Ties broken by the labels themselves so the ranking is deterministic.
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(top_k);
    let (mut sn, mut sa) = (0.0, 0.0);
    for (labels, _) in &ranked {
        sn += nmi(&episode.labels, labels)?;
        sa += ari(&episode.labels, labels)?;
    }
    let k = ranked.len() as f64;
    Ok((sn / k, sa / k))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetMetrics {
    pub set_id: usize,
    pub nmi: f64,
    pub ari: f64,
    /// `NaN` when not computed.
    pub mc: f64,
    pub sdpp: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub median: f64,
}

impl Summary {
    /// Ignores `NaN` entries; all-`NaN` input yields `NaN` fields.
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let mut v: Vec<f64> = values.into_iter().filter(|x| !x.is_nan()).collect();
        if v.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN, median: f64::NAN };
        }
        v.sort_by(f64::total_cmp);
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        let mid = v.len() / 2;
        let median = if v.len() % 2 == 1 { v[mid] } else { 0.5 * (v[mid - 1] + v[mid]) };
        Self { mean, std, median }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub sets: Vec<SetMetrics>,
    pub nmi: Summary,
    pub ari: Summary,
    pub mc: Summary,
    pub sdpp: Summary,
    pub metadata: serde_json::Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub compute_mc: bool,
    /// Permutations per set for SDPP; 0 skips it.
    pub num_perms: usize,
    pub seed: u64,
}

impl MetricsReport {
    /// Greedy NMI/ARI (and optionally MC and SDPP) per set.
    pub fn evaluate(
        params: &ModelParams,
        episodes: &[Episode],
        opts: EvalOptions,
        workers: usize,
        metadata: serde_json::Value,
    ) -> Result<Self> {
        let one = |(i, ep): (usize, &Episode)| -> Result<SetMetrics> {
            let labels = greedy_labels(params, ep)?;
            let nmi = nmi(&ep.labels, &labels)?;
            let ari = if ep.len() >= 2 { ari(&ep.labels, &labels)? } else { 1.0 };
            let mc = if opts.compute_mc { mc_metric(params, std::slice::from_ref(ep))? } else { f64::NAN };
            let sdpp = if opts.num_perms >= 2 {
                let mut rng = rng_from_seed(split_seed(opts.seed, 7, i as u64));
                sdpp(params, ep, opts.num_perms, &mut rng)?
            } else {
                f64::NAN
            };
            Ok(SetMetrics { set_id: i, nmi, ari, mc, sdpp })
        };
        let sets: Result<Vec<SetMetrics>> = if workers <= 1 {
            episodes.iter().enumerate().map(one).collect()
        } else {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
            pool.install(|| episodes.par_iter().enumerate().map(one).collect())
        };
        Ok(Self::from_sets(sets?, metadata))
    }

    pub fn from_sets(sets: Vec<SetMetrics>, metadata: serde_json::Value) -> Self {
        Self {
            nmi: Summary::of(sets.iter().map(|s| s.nmi)),
            ari: Summary::of(sets.iter().map(|s| s.ari)),
            mc: Summary::of(sets.iter().map(|s| s.mc)),
            sdpp: Summary::of(sets.iter().map(|s| s.sdpp)),
            sets,
            metadata,
        }
    }

    /// Aggregates and metadata (per-set rows go to the CSV).
    pub fn to_json(&self) -> Result<String> {
        let v = serde_json::json!({
            "num_sets": self.sets.len(),
            "nmi": summary_json(&self.nmi),
            "ari": summary_json(&self.ari),
            "mc": summary_json(&self.mc),
            "sdpp": summary_json(&self.sdpp),
            "metadata": self.metadata,
        });
        Ok(serde_json::to_string_pretty(&v)?)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("set_id,nmi,ari,mc,sdpp\n");
        for s in &self.sets {
            out.push_str(&format!("{},{},{},{},{}\n", s.set_id, s.nmi, s.ari, s.mc, s.sdpp));
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join("metrics.json"), self.to_json()?)?;
        std::fs::write(dir.join("metrics.csv"), self.to_csv())?;
        Ok(())
    }
}

/// JSON has no NaN; missing aggregates become `null`.
fn summary_json(s: &Summary) -> serde_json::Value {
    let f = |v: f64| if v.is_finite() { serde_json::json!(v) } else { serde_json::Value::Null };
    serde_json::json!({ "mean": f(s.mean), "std": f(s.std), "median": f(s.median) })
}

/// Sorted values with their empirical cumulative fraction.
pub fn ecdf(values: &[f64]) -> Vec<(f64, f64)> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.into_iter().enumerate().map(|(i, x)| (x, (i + 1) as f64 / n)).collect()
}

pub fn ecdf_csv(columns: &[(&str, &[f64])]) -> String {
    let mut out = String::from("series,value,cumulative_fraction\n");
    for (name, values) in columns {
        for (x, f) in ecdf(values) {
            out.push_str(&format!("{name},{x},{f}\n"));
        }
    }
    out
}
