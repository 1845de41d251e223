//! Training loop: per-episode branch mixing, batch-averaged gradients, Adam
//! with a cosine schedule, and binary checkpoints.
//!
//! Every episode of iteration `t`, slot `s` derives its randomness from
//! `split_seed(seed, t, s)`, so a run is a pure function of its seed and
//! configuration regardless of the worker count, and resuming from a
//! checkpoint only needs the iteration counter.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::datagen::{rng_from_seed, split_seed, EpisodeSource};
use crate::error::{Error, Result};
use crate::losses::{combined_step_loss, ncp_step_loss, Branch, LossWeights, StepOutput};
use crate::model::{EncoderConfig, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    Gfncp,
    NcpBaseline,
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gfncp" => Ok(Self::Gfncp),
            "ncp-baseline" => Ok(Self::NcpBaseline),
            other => Err(Error::Config(format!("unknown objective `{other}` (gfncp | ncp-baseline)"))),
        }
    }
}

/// Which logged quantity decides the best snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionKey {
    Total,
    Mc,
}

impl std::str::FromStr for SelectionKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "total" => Ok(Self::Total),
            "mc" => Ok(Self::Mc),
            other => Err(Error::Config(format!("unknown selection key `{other}` (total | mc)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    /// Probability that an episode takes the data-policy branch.
    pub beta: f64,
    pub delta: f64,
    pub lambda: f64,
    pub lr_init: f64,
    pub lr_min: f64,
    pub seed: u64,
    pub objective: Objective,
    /// Window (in iterations) for selection-key averaging and observer calls.
    pub eval_every: usize,
    pub checkpoint_path: Option<PathBuf>,
    /// Stop after this many windows without improvement of the selection key.
    pub patience: Option<usize>,
    pub selection_key: SelectionKey,
    pub adam: AdamConfig,
    /// Stop once this many iterations are complete; the schedule still
    /// spans `iterations`. Used to split a run for resumption.
    #[serde(default)]
    pub halt_at: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            batch_size: 64,
            beta: 0.999,
            delta: LossWeights::default().delta,
            lambda: LossWeights::default().lambda,
            lr_init: 5e-4,
            lr_min: 1e-6,
            seed: 0,
            objective: Objective::Gfncp,
            eval_every: 100,
            checkpoint_path: None,
            patience: None,
            selection_key: SelectionKey::Total,
            adam: AdamConfig::default(),
            halt_at: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.iterations == 0 {
            return bad("iterations must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad("beta must lie in [0, 1]");
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_init) {
            return bad("need 0 <= lr_min <= lr_init");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be >= 1");
        }
        if self.delta < 0.0 || self.lambda < 0.0 {
            return bad("delta and lambda must be non-negative");
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights { delta: self.delta, lambda: self.lambda }
    }

    /// Sets one field from its textual form (config-file and CLI keys).
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
        }
        match key {
            "iterations" => self.iterations = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "delta" => self.delta = num(key, value)?,
            "lambda" => self.lambda = num(key, value)?,
            "lr_init" => self.lr_init = num(key, value)?,
            "lr_min" => self.lr_min = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "objective" => self.objective = value.parse()?,
            "eval_every" => self.eval_every = num(key, value)?,
            "checkpoint_path" => self.checkpoint_path = (!value.is_empty()).then(|| PathBuf::from(value)),
            "patience" => self.patience = if value == "none" { None } else { Some(num(key, value)?) },
            "selection_key" => self.selection_key = value.parse()?,
            "adam_beta1" => self.adam.beta1 = num(key, value)?,
            "adam_beta2" => self.adam.beta2 = num(key, value)?,
            "adam_eps" => self.adam.eps = num(key, value)?,
            "halt_at" => self.halt_at = if value == "none" { None } else { Some(num(key, value)?) },
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// `lr_min + (lr_init - lr_min) (1 + cos(pi t / T)) / 2`, clamped to
/// `lr_min` past the horizon.
pub fn cosine_lr(t: usize, total: usize, lr_init: f64, lr_min: f64) -> f64 {
    if total == 0 || t >= total {
        return lr_min;
    }
    let phase = std::f64::consts::PI * t as f64 / total as f64;
    lr_min + 0.5 * (lr_init - lr_min) * (1.0 + phase.cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment buffers plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Tensor> = params.named_tensors().iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect();
        Self { step: 0, m: zeros.clone(), v: zeros }
    }
}

/// Bias-corrected Adam update in place.
pub fn adam_step(params: &mut ModelParams, grads: &[Tensor], state: &mut AdamState, lr: f64, cfg: AdamConfig) -> Result<()> {
    let tensors = params.tensors_mut();
    if grads.len() != tensors.len() || state.m.len() != tensors.len() || state.v.len() != tensors.len() {
        return Err(Error::Shape { kernel: "adam_step", detail: "buffer count does not match parameters".into() });
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient);
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in tensors.into_iter().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        if p.shape() != g.shape() || p.shape() != m.shape() || p.shape() != v.shape() {
            return Err(Error::Shape {
                kernel: "adam_step",
                detail: format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
            });
        }
        let (m, v) = (m.data_mut(), v.data_mut());
        for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Batch means logged once per iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iteration: usize,
    pub lr: f64,
    pub mc: f64,
    /// Mean over the episodes that evaluated the contrastive term.
    pub cd: f64,
    pub reg: f64,
    pub total: f64,
    /// Fraction of the batch that took the data-policy branch.
    pub branch_fraction: f64,
}

pub const HISTORY_HEADER: &str = "iteration,lr,mc,cd,reg,total,branch_fraction";

pub fn write_history(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{:?},{:?},{:?},{:?},{:?},{:?}\n",
            r.iteration, r.lr, r.mc, r.cd, r.reg, r.total, r.branch_fraction
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Everything needed to continue a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub adam: AdamState,
    /// Iterations completed so far.
    pub iteration: usize,
}

impl TrainState {
    pub fn new(params: ModelParams) -> Self {
        let adam = AdamState::new(&params);
        Self { params, adam, iteration: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub history: Vec<HistoryRow>,
    /// Parameters at the end of the window with the lowest mean selection key.
    pub best: Option<(usize, ModelParams)>,
    pub stopped_early: bool,
}

/// Called with the number of completed iterations and the current weights
/// every `eval_every` iterations and at the end of the run.
pub type Observer<'a> = dyn FnMut(usize, &ModelParams) -> Result<()> + 'a;

/// Loss and gradients of one episode of iteration `iteration`, slot `slot`.
fn episode_step(
    cfg: &TrainConfig,
    source: &dyn EpisodeSource,
    params: &ModelParams,
    iteration: usize,
    slot: usize,
) -> Result<(Branch, StepOutput)> {
    let key = split_seed(cfg.seed, iteration as u64, slot as u64);
    let episode = source.sample(split_seed(key, 0, 0))?;
    let mut rng = rng_from_seed(split_seed(key, 1, 0));
    let branch = if rng.gen_bool(cfg.beta) { Branch::DataPolicy } else { Branch::Exploration };
    let out = match cfg.objective {
        Objective::Gfncp => combined_step_loss(params, &episode, branch, cfg.weights(), &mut rng),
        Objective::NcpBaseline => ncp_step_loss(params, &episode, &mut rng),
    };
    let diverged = || Error::Diverged { iteration, branch: branch.label() };
    match out {
        Ok(o) if o.breakdown.total.is_finite() => Ok((branch, o)),
        Ok(_) | Err(Error::NonFinite { .. }) => Err(diverged()),
        Err(e) => Err(e),
    }
}

/// Runs iterations `state.iteration..cfg.iterations`. `workers = 1` runs
/// serially; any worker count gives identical results.
pub fn train(
    cfg: &TrainConfig,
    source: &dyn EpisodeSource,
    mut state: TrainState,
    workers: usize,
    observer: Option<&mut Observer<'_>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if source.point_dim() != state.params.config.d_x {
        return Err(Error::Config(format!(
            "data dimension {} does not match model d_x = {}",
            source.point_dim(),
            state.params.config.d_x
        )));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let mut observer = observer;
    let mut history = Vec::new();
    let mut best: Option<(usize, ModelParams)> = None;
    let mut best_key = f64::INFINITY;
    let mut stale = 0;
    let mut window = Vec::new();
    let mut stopped_early = false;

    let end = cfg.halt_at.map_or(cfg.iterations, |h| h.min(cfg.iterations));
    while state.iteration < end {
        let it = state.iteration;
        let params = &state.params;
        let outputs: Vec<Result<(Branch, StepOutput)>> = if workers <= 1 {
            (0..cfg.batch_size).map(|s| episode_step(cfg, source, params, it, s)).collect()
        } else {
            pool.install(|| (0..cfg.batch_size).into_par_iter().map(|s| episode_step(cfg, source, params, it, s)).collect())
        };

        // Serial reduce in slot order keeps the sum independent of scheduling.
        let mut grads: Vec<Tensor> = state.adam.m.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        let (mut mc, mut cd, mut reg, mut total, mut data, mut cd_count) = (0.0, 0.0, 0.0, 0.0, 0usize, 0usize);
        for out in outputs {
            let (branch, out) = out?;
            for (acc, g) in grads.iter_mut().zip(&out.grads) {
                acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
            }
            let b = &out.breakdown;
            mc += b.mc;
            reg += b.reg;
            total += b.total;
            if b.cd_evaluated {
                cd += b.cd;
                cd_count += 1;
            }
            if branch == Branch::DataPolicy {
                data += 1;
            }
        }
        let scale = 1.0 / cfg.batch_size as f64;
        for g in &mut grads {
            g.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
        let lr = cosine_lr(it, cfg.iterations, cfg.lr_init, cfg.lr_min);
        adam_step(&mut state.params, &grads, &mut state.adam, lr, cfg.adam)?;
        state.iteration += 1;

        let row = HistoryRow {
            iteration: it,
            lr,
            mc: mc * scale,
            cd: if cd_count > 0 { cd / cd_count as f64 } else { 0.0 },
            reg: reg * scale,
            total: total * scale,
            branch_fraction: data as f64 * scale,
        };
        window.push(match cfg.selection_key {
            SelectionKey::Total => row.total,
            SelectionKey::Mc => row.mc,
        });
        history.push(row);

        let done = state.iteration == end;
        if state.iteration % cfg.eval_every == 0 || done {
            let mean = window.iter().sum::<f64>() / window.len() as f64;
            window.clear();
            if mean < best_key {
                best_key = mean;
                best = Some((state.iteration, state.params.clone()));
                stale = 0;
            } else {
                stale += 1;
            }
            if let Some(obs) = observer.as_deref_mut() {
                obs(state.iteration, &state.params)?;
            }
            if let Some(path) = &cfg.checkpoint_path {
                Checkpoint::from_state(&state, cfg).save(path)?;
            }
            if cfg.patience.is_some_and(|p| stale >= p) && !done {
                stopped_early = true;
                break;
            }
        }
    }
    Ok(TrainOutcome { state, history, best, stopped_early })
}

const MAGIC: &[u8; 8] = b"GFNCPCK\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    encoder: EncoderConfig,
    train: TrainConfig,
    iteration: usize,
    adam_step: u64,
    /// Episode randomness is `split_seed(seed, iteration, slot)`; the next
    /// iteration index is the whole generator state.
    rng: RngState,
    tensors: Vec<TensorMeta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RngState {
    seed: u64,
    next_iteration: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

/// Binary checkpoint: magic, `u32` version, `u64` metadata length, JSON
/// metadata, then little-endian `f64` parameters, Adam `m`, Adam `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub state: TrainState,
    pub train: TrainConfig,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState, train: &TrainConfig) -> Self {
        Self { state: state.clone(), train: train.clone() }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let params = &self.state.params;
        let named = params.named_tensors();
        let meta = CheckpointMeta {
            encoder: params.config.clone(),
            train: self.train.clone(),
            iteration: self.state.iteration,
            adam_step: self.state.adam.step,
            rng: RngState { seed: self.train.seed, next_iteration: self.state.iteration },
            tensors: named.iter().map(|(n, t)| TensorMeta { name: n.clone(), shape: t.shape().to_vec() }).collect(),
        };
        let meta = serde_json::to_vec(&meta)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        let blocks = named.iter().map(|(_, t)| *t).chain(&self.state.adam.m).chain(&self.state.adam.v);
        for t in blocks {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::Checkpoint(m.to_string());
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| corrupt("truncated header"))?;
        if &magic != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(|_| corrupt("truncated header"))?;
        let version = u32::from_le_bytes(word);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version} (expected {CHECKPOINT_VERSION})")));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(|_| corrupt("truncated header"))?;
        let len = usize::try_from(u64::from_le_bytes(len)).map_err(|_| corrupt("metadata too large"))?;
        if r.len() < len {
            return Err(corrupt("truncated metadata"));
        }
        let (meta, payload) = r.split_at(len);
        let meta: CheckpointMeta =
            serde_json::from_slice(meta).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;

        let mut params = ModelParams::init(&meta.encoder, 0)?;
        let expected: Vec<TensorMeta> = params
            .named_tensors()
            .iter()
            .map(|(n, t)| TensorMeta { name: n.clone(), shape: t.shape().to_vec() })
            .collect();
        if expected != meta.tensors {
            return Err(corrupt("tensor names or shapes do not match the encoder configuration"));
        }
        let total: usize = expected.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        if payload.len() != 3 * total * 8 {
            return Err(Error::Checkpoint(format!("payload has {} bytes, expected {}", payload.len(), 3 * total * 8)));
        }
        let mut values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut fill = |t: &mut Tensor| t.data_mut().iter_mut().for_each(|v| *v = values.next().unwrap());
        params.tensors_mut().into_iter().for_each(&mut fill);
        let mut adam = AdamState::new(&params);
        adam.step = meta.adam_step;
        adam.m.iter_mut().for_each(&mut fill);
        adam.v.iter_mut().for_each(&mut fill);
        Ok(Self { state: TrainState { params, adam, iteration: meta.iteration }, train: meta.train })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Loads and checks that the stored architecture is `expected`.
    pub fn load_matching(path: &Path, expected: &EncoderConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        if &ck.state.params.config != expected {
            return Err(Error::Checkpoint(format!(
                "encoder configuration mismatch: checkpoint has {:?}, expected {:?}",
                ck.state.params.config, expected
            )));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{CrpConfig, MogSource};
    use crate::model::Activation;

    fn tiny_model() -> ModelParams {
        let cfg = EncoderConfig {
            d_x: 2,
            d_h: 4,
            d_g: 4,
            d_u: 3,
            h_hidden: vec![6],
            g_hidden: vec![6],
            u_hidden: vec![6],
            f_hidden: vec![6],
            activation: Activation::Relu,
            online_mode: false,
            input_scale: 1.0,
        };
        ModelParams::init(&cfg, 11).unwrap()
    }

    fn source() -> MogSource {
        MogSource { crp: CrpConfig { alpha: 1.0, n_min: 4, n_max: 8, fixed_k: None, max_rejections: 100 }, sigma: 5.0 }
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig { iterations: 6, batch_size: 3, beta: 0.5, seed: 5, eval_every: 2, ..TrainConfig::default() }
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 100, 5e-4, 1e-6), 5e-4);
        assert!((cosine_lr(100, 100, 5e-4, 1e-6) - 1e-6).abs() < 1e-18);
        assert!((cosine_lr(50, 100, 5e-4, 1e-6) - (5e-4 + 1e-6) / 2.0).abs() < 1e-15);
        assert_eq!(cosine_lr(150, 100, 5e-4, 1e-6), 1e-6);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut p = tiny_model();
        let before = p.clone();
        let mut st = AdamState::new(&p);
        let zeros = st.m.clone();
        adam_step(&mut p, &zeros, &mut st, 1e-2, AdamConfig::default()).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn adam_constant_gradient_steps_by_lr() {
        let mut p = tiny_model();
        let mut st = AdamState::new(&p);
        let grads: Vec<Tensor> =
            st.m.iter().map(|t| Tensor::new(t.shape().to_vec(), vec![0.3; t.numel()]).unwrap()).collect();
        let lr = 1e-3;
        let mut prev = p.named_tensors()[0].1.data()[0];
        for _ in 0..200 {
            adam_step(&mut p, &grads, &mut st, lr, AdamConfig::default()).unwrap();
            let now = p.named_tensors()[0].1.data()[0];
            // m_hat = v_hat^(1/2) = g exactly under bias correction.
            assert!(((prev - now) - lr).abs() < 1e-9);
            prev = now;
        }
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut p = tiny_model();
        let mut st = AdamState::new(&p);
        let mut grads = st.m.clone();
        grads[0].data_mut()[0] = f64::NAN;
        assert!(matches!(adam_step(&mut p, &grads, &mut st, 1e-3, AdamConfig::default()), Err(Error::NonFiniteGradient)));
    }

    #[test]
    fn zero_learning_rate_leaves_params_unchanged() {
        let p = tiny_model();
        let cfg = TrainConfig { lr_init: 0.0, lr_min: 0.0, ..small_cfg() };
        let out = train(&cfg, &source(), TrainState::new(p.clone()), 1, None).unwrap();
        assert_eq!(out.state.params, p);
        assert_eq!(out.history.len(), 6);
    }

    #[test]
    fn branch_extremes() {
        let p = tiny_model();
        let all_data = TrainConfig { beta: 1.0, ..small_cfg() };
        let out = train(&all_data, &source(), TrainState::new(p.clone()), 1, None).unwrap();
        assert!(out.history.iter().all(|r| r.branch_fraction == 1.0));
        let explore = TrainConfig { beta: 0.0, ..small_cfg() };
        let out = train(&explore, &source(), TrainState::new(p), 1, None).unwrap();
        assert!(out.history.iter().all(|r| r.branch_fraction == 0.0 && r.cd == 0.0));
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let p = tiny_model();
        let a = train(&small_cfg(), &source(), TrainState::new(p.clone()), 1, None).unwrap();
        let b = train(&small_cfg(), &source(), TrainState::new(p), 3, None).unwrap();
        assert_eq!(a.state, b.state);
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn resume_from_checkpoint_matches_straight_run() {
        let p = tiny_model();
        let cfg = TrainConfig { iterations: 8, ..small_cfg() };
        let straight = train(&cfg, &source(), TrainState::new(p.clone()), 1, None).unwrap();
        let first = train(&TrainConfig { halt_at: Some(4), ..cfg.clone() }, &source(), TrainState::new(p), 1, None).unwrap();
        assert_eq!(first.state.iteration, 4);
        let bytes = Checkpoint::from_state(&first.state, &cfg).to_bytes().unwrap();
        let resumed = Checkpoint::from_bytes(&bytes).unwrap().state;
        let rest = train(&cfg, &source(), resumed, 2, None).unwrap();
        assert_eq!(rest.state, straight.state);
        assert_eq!(rest.history[..], straight.history[4..]);
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let p = tiny_model();
        let out = train(&small_cfg(), &source(), TrainState::new(p), 1, None).unwrap();
        let ck = Checkpoint::from_state(&out.state, &small_cfg());
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn checkpoint_errors() {
        let ck = Checkpoint::from_state(&TrainState::new(tiny_model()), &small_cfg());
        let mut bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..20]).is_err());
        bytes[8] = 9;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
        bytes[0] = b'X';
        assert!(Checkpoint::from_bytes(&bytes).is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        ck.save(&path).unwrap();
        let mut other = ck.state.params.config.clone();
        other.d_h = 5;
        assert!(Checkpoint::load_matching(&path, &other).is_err());
        assert!(Checkpoint::load_matching(&path, &ck.state.params.config).is_ok());
    }

    #[test]
    fn non_finite_loss_reports_iteration_and_branch() {
        let mut p = tiny_model();
        // Huge output bias drives the squared energy to overflow.
        p.f.layers.last_mut().unwrap().bias.data_mut()[0] = 1e200;
        let cfg = TrainConfig { beta: 1.0, ..small_cfg() };
        let err = train(&cfg, &source(), TrainState::new(p), 1, None).unwrap_err();
        assert!(matches!(err, Error::Diverged { iteration: 0, branch: "data-policy" }), "{err}");
    }
}
