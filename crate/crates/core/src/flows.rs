//! Flow semantics on the partition DAG.
//!
//! State flows and edge flows share one object, `exp(-Ê)`, where the shifted
//! energy `Ê` of a prefix of length `n` out of `N` points is
//!
//! * `0` for `n = 1`,
//! * `E[c_{1:n}] - min_j E[c_{1:n-1}, j]` for `2 <= n < N` (the minimum runs
//!   over the `K + 1` candidate labels),
//! * `E[c_{1:N}]` for `n = N`.
//!
//! The forward policy is the softmax of `-Ê` over the candidates and the
//! terminal reward is `exp(-E[c_{1:N}])`. All probabilities are handled in
//! log space.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{logsumexp, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{trajectory_energies, ClusterState, ModelParams, PointEncodings, StepLayout};
use crate::partitions::check_canonical;

/// A complete decoding: visiting order, labels in that order, and the log
/// probability of every step (the first step is always `ln 1 = 0`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub order: Vec<usize>,
    pub labels: Vec<usize>,
    pub step_log_probs: Vec<f64>,
    pub log_prob: f64,
}

impl Trajectory {
    /// Log probability including the uniform `1 / N!` choice of order.
    pub fn log_prob_with_order(&self) -> f64 {
        self.log_prob - ln_factorial(self.order.len())
    }

    /// Labels indexed by point, canonical in point order.
    pub fn labels_by_point(&self) -> Vec<usize> {
        crate::partitions::to_point_order(&self.labels, &self.order)
    }
}

pub fn ln_factorial(n: usize) -> f64 {
    (2..=n).map(|k| (k as f64).ln()).sum()
}

/// Shifted energies of the candidates at prefix level `level` (the length
/// of the prefix after the candidate is appended).
fn shift_candidates(energies: &[f64], level: usize, total: usize) -> Vec<f64> {
    if level == 1 {
        return vec![0.0; energies.len()];
    }
    if level == total {
        return energies.to_vec();
    }
    let min = energies.iter().copied().fold(f64::INFINITY, f64::min);
    energies.iter().map(|e| e - min).collect()
}

fn log_softmax_neg(values: &[f64]) -> Vec<f64> {
    let neg: Vec<f64> = values.iter().map(|v| -v).collect();
    let lse = logsumexp(&neg);
    neg.iter().map(|v| v - lse).collect()
}

/// Sequential evaluator of the forward policy for one point set.
pub struct Policy<'a> {
    params: &'a ModelParams,
    enc: PointEncodings,
}

impl<'a> Policy<'a> {
    pub fn new(params: &'a ModelParams, points: &Tensor) -> Result<Self> {
        Ok(Self { params, enc: params.encode_points(points)? })
    }

    pub fn params(&self) -> &ModelParams {
        self.params
    }

    pub fn num_points(&self) -> usize {
        self.enc.len()
    }

    pub fn start(&self, order: Vec<usize>) -> Result<ClusterState> {
        ClusterState::new(self.params, &self.enc, order)
    }

    pub fn state(&self, order: Vec<usize>, labels: &[usize]) -> Result<ClusterState> {
        ClusterState::from_labels(self.params, &self.enc, order, labels)
    }

    pub fn assign(&self, state: &mut ClusterState, label: usize) -> Result<()> {
        state.assign(self.params, &self.enc, label)
    }

    /// Raw energies `E[c_{1:n}, j]` of the candidates extending `state`.
    pub fn candidate_energies(&self, state: &ClusterState) -> Result<Vec<f64>> {
        if state.is_empty() {
            let mut first = state.clone();
            first.assign(self.params, &self.enc, 0)?;
            return Ok(vec![first.energy(self.params)?]);
        }
        state.candidate_energies(self.params, &self.enc)
    }

    /// `Ê` of each candidate extending `state`.
    pub fn shifted_candidates(&self, state: &ClusterState) -> Result<Vec<f64>> {
        let e = self.candidate_energies(state)?;
        Ok(shift_candidates(&e, state.len() + 1, state.num_points()))
    }

    /// `P_F(c_{n} = j | c_{1:n-1}, order)` for the next point. The first
    /// point goes to cluster 0 with probability one.
    pub fn forward_log_probs(&self, state: &ClusterState) -> Result<Vec<f64>> {
        if state.is_empty() {
            return Ok(vec![0.0]);
        }
        Ok(log_softmax_neg(&self.shifted_candidates(state)?))
    }

    pub fn forward_distribution(&self, state: &ClusterState) -> Result<Vec<f64>> {
        Ok(self.forward_log_probs(state)?.into_iter().map(f64::exp).collect())
    }

    /// Argmax decoding; ties go to the smallest cluster index.
    pub fn greedy_decode(&self, order: Vec<usize>) -> Result<Trajectory> {
        self.decode(order, |lp| {
            let mut best = 0;
            for (j, v) in lp.iter().enumerate() {
                if *v > lp[best] {
                    best = j;
                }
            }
            best
        })
    }

    /// Ancestral sample from the policy. A uniformly random order is drawn
    /// when `order` is `None`.
    pub fn sample_trajectory<R: Rng + ?Sized>(&self, rng: &mut R, order: Option<Vec<usize>>) -> Result<Trajectory> {
        let order = order.unwrap_or_else(|| {
            let mut o: Vec<usize> = (0..self.num_points()).collect();
            o.shuffle(rng);
            o
        });
        self.decode(order, |lp| sample_log_categorical(rng, lp))
    }

    fn decode(&self, order: Vec<usize>, mut pick: impl FnMut(&[f64]) -> usize) -> Result<Trajectory> {
        let mut state = self.start(order)?;
        let mut step_log_probs = Vec::with_capacity(state.num_points());
        while !state.is_complete() {
            let lp = self.forward_log_probs(&state)?;
            let j = pick(&lp);
            step_log_probs.push(lp[j]);
            self.assign(&mut state, j)?;
        }
        let log_prob = step_log_probs.iter().sum();
        Ok(Trajectory { order: state.order().to_vec(), labels: state.labels().to_vec(), step_log_probs, log_prob })
    }
}

/// Draws an index from log probabilities by inverting the cumulative sum.
pub fn sample_log_categorical<R: Rng + ?Sized>(rng: &mut R, log_probs: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (j, lp) in log_probs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return j;
        }
    }
    // Rounding left `u` past the total mass: take the last positive entry.
    log_probs.iter().rposition(|lp| lp.is_finite()).unwrap_or(0)
}

/// `Ê` of a prefix `c_{1:n}` (labels in visiting order).
pub fn shifted_energy(params: &ModelParams, points: &Tensor, order: &[usize], prefix: &[usize]) -> Result<f64> {
    check_canonical(prefix)?;
    let n = prefix.len();
    let total = points.rows();
    if n == 0 || n > total {
        return Err(Error::Labels(format!("prefix length {n} outside 1..={total}")));
    }
    if n == 1 {
        return Ok(0.0);
    }
    let policy = Policy::new(params, points)?;
    let parent = policy.state(order.to_vec(), &prefix[..n - 1])?;
    let cands = policy.shifted_candidates(&parent)?;
    cands
        .get(prefix[n - 1])
        .copied()
        .ok_or_else(|| Error::Labels(format!("label {} is not a valid extension", prefix[n - 1])))
}

/// Forward distribution over the `K + 1` extensions of `prefix`.
pub fn forward_distribution(params: &ModelParams, points: &Tensor, order: &[usize], prefix: &[usize]) -> Result<Vec<f64>> {
    check_canonical(prefix)?;
    let policy = Policy::new(params, points)?;
    let state = policy.state(order.to_vec(), prefix)?;
    policy.forward_distribution(&state)
}

/// Log reward `-E[c_{1:N}]` of a full assignment given per point.
pub fn reward_log(params: &ModelParams, points: &Tensor, labels: &[usize]) -> Result<f64> {
    check_canonical(labels)?;
    if labels.len() != points.rows() {
        return Err(Error::Labels(format!("{} labels for {} points", labels.len(), points.rows())));
    }
    let policy = Policy::new(params, points)?;
    let order: Vec<usize> = (0..labels.len()).collect();
    let state = policy.state(order, labels)?;
    Ok(-state.energy(params)?)
}

/// Shifted energies for every row of a [`StepLayout`] given raw candidate
/// energies (`M x 1`). The subtracted minimum is the energy of the argmin
/// candidate, so the loss gradient includes its dependence on the weights.
pub fn shifted_rows<'t>(energies: Var<'t>, layout: &StepLayout) -> Result<Var<'t>> {
    let tape = energies.tape();
    let steps = layout.num_steps();
    let raw = energies.value();
    let m = layout.num_rows();
    let mut shift_groups: Vec<Vec<usize>> = vec![Vec::new(); m];
    let mut keep = vec![1.0; m];
    for step in 0..steps {
        let rows = layout.step_rows(step);
        if step == 0 {
            rows.for_each(|r| keep[r] = 0.0);
        } else if step + 1 < steps {
            let mut argmin = rows.start;
            for r in rows.clone() {
                if raw.data()[r] < raw.data()[argmin] {
                    argmin = r;
                }
            }
            rows.for_each(|r| shift_groups[r] = vec![argmin]);
        }
    }
    let shift = energies.gather_sum(shift_groups.into())?;
    let keep = tape.constant(Tensor::matrix(m, 1, keep)?);
    energies.sub(shift)?.mul(keep)
}

/// Log forward probability of the taken label at steps `1..N` given
/// per-row values `v` (`Ê` or raw `E`; softmax is shift invariant).
/// Returns an `(N - 1) x 1` column, or `None` for a single point.
pub fn step_log_probs<'t>(values: Var<'t>, layout: &StepLayout) -> Result<Option<Var<'t>>> {
    let steps = layout.num_steps();
    if steps < 2 {
        return Ok(None);
    }
    let lse = values.neg()?.segment_logsumexp(layout.offsets.clone())?;
    let lse = lse.gather_rows(&(1..steps).collect::<Vec<_>>())?;
    let taken = values.gather_rows(&layout.chosen[1..])?;
    Ok(Some(taken.neg()?.sub(lse)?))
}

/// Log probability of the trajectory that visits `order` and assigns
/// `labels` (canonical in visiting order), optionally including `-ln N!`.
pub fn trajectory_logprob(
    params: &ModelParams,
    points: &Tensor,
    labels: &[usize],
    order: &[usize],
    include_order_factor: bool,
) -> Result<f64> {
    let tape = Tape::new();
    let pv = params.register(&tape, false);
    let x = tape.constant(points.clone());
    let (e, layout) = trajectory_energies(&pv, x, order, labels)?;
    let hat = shifted_rows(e, &layout)?;
    let lp = match step_log_probs(hat, &layout)? {
        Some(v) => v.value().data().iter().sum(),
        None => 0.0,
    };
    Ok(if include_order_factor { lp - ln_factorial(labels.len()) } else { lp })
}
