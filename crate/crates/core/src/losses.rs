//! Training objectives: marginal consistency, contrastive divergence, energy
//! regularization, their combination, and the sequential NLL baseline.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::datagen::Episode;
use crate::error::{Error, Result};
use crate::flows::{shifted_rows, step_log_probs, Policy};
use crate::model::{energy, trajectory_energies, ModelParams, ParamVars, StepLayout};
use crate::partitions::reorder;

/// Squared flow-matching residual summed over steps `2..=N`, given
/// per-row shifted energies. Returns the scalar loss and the `(N-1) x 1`
/// residual column (absent for a single point).
pub fn mc_from_shifted<'t>(hat: Var<'t>, layout: &StepLayout) -> Result<(Var<'t>, Option<Var<'t>>)> {
    let tape = hat.tape();
    let steps = layout.num_steps();
    if steps < 2 {
        return Ok((tape.constant(Tensor::scalar(0.0)), None));
    }
    let lse = hat.neg()?.segment_logsumexp(layout.offsets.clone())?;
    let lse = lse.gather_rows(&(1..steps).collect::<Vec<_>>())?;
    let parent = hat.gather_rows(&layout.chosen[..steps - 1])?;
    let residual = parent.add(lse)?;
    Ok((residual.square()?.sum()?, Some(residual)))
}

/// Marginal-consistency loss of one trajectory.
pub fn mc_loss<'t>(pv: &ParamVars<'t>, points: Var<'t>, order: &[usize], labels: &[usize]) -> Result<Var<'t>> {
    let (e, layout) = trajectory_energies(pv, points, order, labels)?;
    let hat = shifted_rows(e, &layout)?;
    Ok(mc_from_shifted(hat, &layout)?.0)
}

/// `E[c_{1:N}]^2` for a full assignment (labels in point order).
pub fn reg_loss<'t>(pv: &ParamVars<'t>, points: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let order: Vec<usize> = (0..labels.len()).collect();
    energy(pv, points, &order, labels)?.square()
}

/// Single-sample contrastive divergence term `E[c] - E[c~]`. Both energies
/// carry gradient; the negative assignment is fixed data.
pub fn cd_loss<'t>(pv: &ParamVars<'t>, points: Var<'t>, labels: &[usize], negative: &[usize]) -> Result<Var<'t>> {
    let order: Vec<usize> = (0..labels.len()).collect();
    let pos = energy(pv, points, &order, labels)?;
    let neg = energy(pv, points, &order, negative)?;
    pos.sub(neg)
}

/// Draws the negative assignment for [`cd_loss`] from the current policy and
/// returns the loss together with it (labels in point order).
pub fn cd_loss_step<'t, R: Rng + ?Sized>(
    params: &ModelParams,
    pv: &ParamVars<'t>,
    points: Var<'t>,
    labels: &[usize],
    rng: &mut R,
) -> Result<(Var<'t>, Vec<usize>)> {
    let policy = Policy::new(params, &points.value())?;
    let negative = policy.sample_trajectory(rng, None)?.labels_by_point();
    Ok((cd_loss(pv, points, labels, &negative)?, negative))
}

/// Sequential negative log-likelihood with raw energies:
/// `-sum_n log softmax(-E[c_{1:n-1}, .])[c_n]`.
pub fn ncp_nll<'t>(pv: &ParamVars<'t>, points: Var<'t>, order: &[usize], labels: &[usize]) -> Result<Var<'t>> {
    let (e, layout) = trajectory_energies(pv, points, order, labels)?;
    match step_log_probs(e, &layout)? {
        Some(lp) => lp.sum()?.neg(),
        None => Ok(points.tape().constant(Tensor::scalar(0.0))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub delta: f64,
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { delta: 0.01, lambda: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Branch {
    DataPolicy,
    Exploration,
}

impl Branch {
    pub fn label(self) -> &'static str {
        match self {
            Branch::DataPolicy => "data-policy",
            Branch::Exploration => "exploration",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mc: f64,
    /// Zero when the contrastive term was not evaluated.
    pub cd: f64,
    pub cd_evaluated: bool,
    pub reg: f64,
    pub total: f64,
    pub mc_residuals: Vec<f64>,
}

/// Loss value plus gradients (declaration order of [`ModelParams`]).
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub breakdown: LossBreakdown,
    pub grads: Vec<Tensor>,
}

/// Sequential-uniform assignment: at every step pick uniformly among the
/// current `K + 1` options. Covers every canonical sequence.
pub fn uniform_labels<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut labels = Vec::with_capacity(n);
    let mut k = 0;
    for step in 0..n {
        let c = if step == 0 { 0 } else { rng.gen_range(0..=k) };
        if c == k {
            k += 1;
        }
        labels.push(c);
    }
    labels
}

pub fn random_order<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// One off-policy training term of the combined objective. A fresh uniform
/// order is drawn for the trajectory. The data-policy branch uses the
/// episode labels and adds the contrastive term; the exploration branch
/// replaces the labels with a sequential-uniform draw.
pub fn combined_step_loss<R: Rng + ?Sized>(
    params: &ModelParams,
    episode: &Episode,
    branch: Branch,
    weights: LossWeights,
    rng: &mut R,
) -> Result<StepOutput> {
    let n = episode.len();
    let order = random_order(n, rng);
    let labels_by_point = match branch {
        Branch::DataPolicy => episode.labels.clone(),
        Branch::Exploration => {
            let visited = uniform_labels(n, rng);
            crate::partitions::to_point_order(&visited, &order)
        }
    };
    let visited = reorder(&labels_by_point, &order);

    let tape = Tape::new();
    let pv = params.register(&tape, true);
    let x = tape.constant(episode.points.clone());
    let (e, layout) = trajectory_energies(&pv, x, &order, &visited)?;
    let hat = shifted_rows(e, &layout)?;
    let (mc, residuals) = mc_from_shifted(hat, &layout)?;
    // The terminal candidate row is E[c_{1:N}].
    let terminal = e.gather_rows(&[layout.chosen[n - 1]])?.sum()?;
    let reg = terminal.square()?;
    let mut total = mc.add(reg.scale(weights.delta)?)?;
    let mut cd_value = 0.0;
    let cd_evaluated = branch == Branch::DataPolicy;
    if cd_evaluated {
        let policy = Policy::new(params, &episode.points)?;
        let neg = policy.sample_trajectory(rng, Some(order.clone()))?;
        let neg_energy = energy(&pv, x, &order, &neg.labels)?;
        let cd = terminal.sub(neg_energy)?;
        cd_value = cd.item();
        total = total.add(cd.scale(weights.lambda)?)?;
    }
    let breakdown = LossBreakdown {
        mc: mc.item(),
        cd: cd_value,
        cd_evaluated,
        reg: reg.item(),
        total: total.item(),
        mc_residuals: residuals.map(|r| r.value().data().to_vec()).unwrap_or_default(),
    };
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite { kernel: "combined_step_loss" });
    }
    tape.backward(total)?;
    Ok(StepOutput { breakdown, grads: pv.grads(&tape) })
}

/// Baseline objective: sequential NLL under a fresh uniform order.
pub fn ncp_step_loss<R: Rng + ?Sized>(params: &ModelParams, episode: &Episode, rng: &mut R) -> Result<StepOutput> {
    let order = random_order(episode.len(), rng);
    let visited = reorder(&episode.labels, &order);
    let tape = Tape::new();
    let pv = params.register(&tape, true);
    let x = tape.constant(episode.points.clone());
    let nll = ncp_nll(&pv, x, &order, &visited)?;
    let breakdown = LossBreakdown {
        mc: 0.0,
        cd: 0.0,
        cd_evaluated: false,
        reg: 0.0,
        total: nll.item(),
        mc_residuals: Vec::new(),
    };
    tape.backward(nll)?;
    Ok(StepOutput { breakdown, grads: pv.grads(&tape) })
}

/// `mc_loss` value without gradients.
pub fn mc_value(params: &ModelParams, points: &Tensor, order: &[usize], labels: &[usize]) -> Result<f64> {
    let tape = Tape::new();
    let pv = params.register(&tape, false);
    let x = tape.constant(points.clone());
    Ok(mc_loss(&pv, x, order, labels)?.item())
}
