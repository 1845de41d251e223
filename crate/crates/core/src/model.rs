//! Permutation-invariant energy network `E = f(G, U)`.
//!
//! Points are encoded by `h` (cluster members) and `u` (unassigned points).
//! Every cluster contributes `g(H_k)` with `H_k = sum of h(x_i)` over its
//! members, `G = sum_k g(H_k)`, and `U = sum of u(x_i)` over the points not yet
//! assigned. With `online_mode` set, `U` is identically zero.
//!
//! Two evaluation paths share the same weights:
//! - [`ClusterState`] keeps incremental `f64` caches for sequential decoding.
//! - [`trajectory_energies`] evaluates every candidate of every step of a
//!   full trajectory in one batched, differentiable pass.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::partitions::check_canonical;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Self::Relu),
            "tanh" => Ok(Self::Tanh),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_x: usize,
    pub d_h: usize,
    pub d_g: usize,
    pub d_u: usize,
    pub h_hidden: Vec<usize>,
    pub g_hidden: Vec<usize>,
    pub u_hidden: Vec<usize>,
    pub f_hidden: Vec<usize>,
    pub activation: Activation,
    pub online_mode: bool,
    /// Fixed factor applied to every input coordinate before `h` and `u`.
    #[serde(default = "unit_scale")]
    pub input_scale: f64,
}

fn unit_scale() -> f64 {
    1.0
}

impl EncoderConfig {
    /// Full-size architecture: 3-layer MLPs of width 128, `d_h = d_u = 128`,
    /// `d_g = 256`, `f: 384 -> 128 -> 128 -> 1`.
    pub fn standard(d_x: usize) -> Self {
        Self {
            d_x,
            d_h: 128,
            d_g: 256,
            d_u: 128,
            h_hidden: vec![128, 128],
            g_hidden: vec![128, 128],
            u_hidden: vec![128, 128],
            f_hidden: vec![128, 128],
            activation: Activation::Relu,
            online_mode: false,
            input_scale: 1.0,
        }
    }

    /// Reduced widths for single-core desk runs.
    pub fn desk(d_x: usize) -> Self {
        Self {
            d_x,
            d_h: 32,
            d_g: 32,
            d_u: 16,
            h_hidden: vec![32, 32],
            g_hidden: vec![32, 32],
            u_hidden: vec![32, 32],
            f_hidden: vec![32, 32],
            activation: Activation::Relu,
            online_mode: false,
            input_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.d_x, self.d_h, self.d_g, self.d_u];
        let hidden = self.h_hidden.iter().chain(&self.g_hidden).chain(&self.u_hidden).chain(&self.f_hidden);
        if dims.iter().chain(hidden).any(|&d| d == 0) {
            return Err(Error::Config("all encoder dimensions must be >= 1".into()));
        }
        if !(self.input_scale.is_finite() && self.input_scale > 0.0) {
            return Err(Error::Config("input_scale must be positive and finite".into()));
        }
        Ok(())
    }

    fn layer_dims(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(output);
        dims
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Multilayer perceptron; the activation follows every layer but the last.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    fn init(dims: &[usize], activation: Activation, rng: &mut ChaCha8Rng) -> Self {
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let wb = (6.0 / fan_in as f64).sqrt();
                let bb = 1.0 / (fan_in as f64).sqrt();
                let weight = (0..fan_in * fan_out).map(|_| rng.gen_range(-wb..wb)).collect();
                let bias = (0..fan_out).map(|_| rng.gen_range(-bb..bb)).collect();
                Linear {
                    weight: Tensor::matrix(fan_in, fan_out, weight).expect("dims"),
                    bias: Tensor::matrix(1, fan_out, bias).expect("dims"),
                }
            })
            .collect();
        Self { layers, activation }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.cols())
    }

    /// Tape-free forward pass over the rows of `x`.
    pub fn forward_plain(&self, x: &Tensor) -> Result<Tensor> {
        let mut cur = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = cur.matmul(&layer.weight)?;
            let o = out.cols();
            for row in out.data_mut().chunks_mut(o) {
                row.iter_mut().zip(layer.bias.data()).for_each(|(v, b)| *v += b);
            }
            if i < last {
                match self.activation {
                    Activation::Relu => out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0)),
                    Activation::Tanh => out.data_mut().iter_mut().for_each(|v| *v = v.tanh()),
                }
            }
            if !out.is_finite() {
                return Err(Error::NonFinite { kernel: "mlp" });
            }
            cur = out;
        }
        Ok(cur)
    }

    pub fn forward_plain_row(&self, x: &[f64]) -> Result<Vec<f64>> {
        let t = Tensor::matrix(1, x.len(), x.to_vec())?;
        Ok(self.forward_plain(&t)?.into_data())
    }
}

/// Tape handles for one [`Mlp`].
#[derive(Clone)]
pub struct MlpVars<'t> {
    layers: Vec<(Var<'t>, Var<'t>)>,
    activation: Activation,
}

impl<'t> MlpVars<'t> {
    pub fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        let mut cur = x;
        let last = self.layers.len() - 1;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            cur = cur.affine(*w, *b)?;
            if i < last {
                cur = match self.activation {
                    Activation::Relu => cur.relu()?,
                    Activation::Tanh => cur.tanh()?,
                };
            }
        }
        Ok(cur)
    }
}

/// Weights of the four networks.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: EncoderConfig,
    pub h: Mlp,
    pub g: Mlp,
    pub u: Mlp,
    pub f: Mlp,
}

impl ModelParams {
    /// Kaiming-style uniform initialization (`U(±sqrt(6 / fan_in))` weights,
    /// `U(±1 / sqrt(fan_in))` biases).
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let act = c.activation;
        let h = Mlp::init(&EncoderConfig::layer_dims(c.d_x, &c.h_hidden, c.d_h), act, &mut rng);
        let g = Mlp::init(&EncoderConfig::layer_dims(c.d_h, &c.g_hidden, c.d_g), act, &mut rng);
        let u = Mlp::init(&EncoderConfig::layer_dims(c.d_x, &c.u_hidden, c.d_u), act, &mut rng);
        let f = Mlp::init(&EncoderConfig::layer_dims(c.d_g + c.d_u, &c.f_hidden, 1), act, &mut rng);
        Ok(Self { config: config.clone(), h, g, u, f })
    }

    fn nets(&self) -> [(&'static str, &Mlp); 4] {
        [("h", &self.h), ("g", &self.g), ("u", &self.u), ("f", &self.f)]
    }

    /// Parameter tensors in declaration order (`h`, `g`, `u`, `f`; weight
    /// then bias per layer).
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (name, net) in self.nets() {
            for (i, layer) in net.layers.iter().enumerate() {
                out.push((format!("{name}.{i}.weight"), &layer.weight));
                out.push((format!("{name}.{i}.bias"), &layer.bias));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for net in [&mut self.h, &mut self.g, &mut self.u, &mut self.f] {
            for layer in &mut net.layers {
                out.push(&mut layer.weight);
                out.push(&mut layer.bias);
            }
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Places every tensor on `tape`, as trainable leaves or as constants.
    pub fn register<'t>(&self, tape: &'t Tape, trainable: bool) -> ParamVars<'t> {
        let mut all = Vec::new();
        let mut mk = |net: &Mlp| MlpVars {
            layers: net
                .layers
                .iter()
                .map(|l| {
                    let put = |t: &Tensor| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
                    let (w, b) = (put(&l.weight), put(&l.bias));
                    all.push(w);
                    all.push(b);
                    (w, b)
                })
                .collect(),
            activation: net.activation,
        };
        let h = mk(&self.h);
        let g = mk(&self.g);
        let u = mk(&self.u);
        let f = mk(&self.f);
        ParamVars { h, g, u, f, all, online_mode: self.config.online_mode, d_u: self.config.d_u, input_scale: self.config.input_scale }
    }

    /// Assembles [`ParamVars`] over already-registered leaves given in
    /// declaration order.
    pub fn bind<'t>(&self, vars: &[Var<'t>]) -> Result<ParamVars<'t>> {
        let expected = self.named_tensors().len();
        if vars.len() != expected {
            return Err(Error::Config(format!("expected {expected} parameter tensors, got {}", vars.len())));
        }
        let mut it = vars.iter().copied();
        let mut take = |net: &Mlp| MlpVars {
            layers: net.layers.iter().map(|_| (it.next().unwrap(), it.next().unwrap())).collect(),
            activation: net.activation,
        };
        let (h, g, u, f) = (take(&self.h), take(&self.g), take(&self.u), take(&self.f));
        Ok(ParamVars {
            h,
            g,
            u,
            f,
            all: vars.to_vec(),
            online_mode: self.config.online_mode,
            d_u: self.config.d_u,
            input_scale: self.config.input_scale,
        })
    }

    /// `h(x_i)` and `u(x_i)` for every point, in point order.
    pub fn encode_points(&self, points: &Tensor) -> Result<PointEncodings> {
        check_points(points, self.config.d_x)?;
        let scaled;
        let x = if self.config.input_scale == 1.0 {
            points
        } else {
            let data = points.data().iter().map(|v| v * self.config.input_scale).collect();
            scaled = Tensor::new(points.shape().to_vec(), data)?;
            &scaled
        };
        Ok(PointEncodings { h: self.h.forward_plain(x)?, u: self.u.forward_plain(x)? })
    }

    /// Energy `f(G, U)` of a single encoded state.
    pub fn energy_from_encoding(&self, g_sum: &[f64], u_sum: &[f64]) -> Result<f64> {
        let mut input = g_sum.to_vec();
        input.extend_from_slice(u_sum);
        Ok(self.f.forward_plain_row(&input)?[0])
    }
}

/// Tape handles for [`ModelParams`].
#[derive(Clone)]
pub struct ParamVars<'t> {
    pub h: MlpVars<'t>,
    pub g: MlpVars<'t>,
    pub u: MlpVars<'t>,
    pub f: MlpVars<'t>,
    all: Vec<Var<'t>>,
    online_mode: bool,
    d_u: usize,
    input_scale: f64,
}

impl<'t> ParamVars<'t> {
    fn scale_input(&self, x: Var<'t>) -> Result<Var<'t>> {
        if self.input_scale == 1.0 {
            Ok(x)
        } else {
            x.scale(self.input_scale)
        }
    }

    /// Gradients in declaration order; zeros for untouched leaves.
    pub fn grads(&self, tape: &Tape) -> Vec<Tensor> {
        self.all
            .iter()
            .map(|v| tape.grad(*v).unwrap_or_else(|| Tensor::zeros(v.shape())))
            .collect()
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.all
    }
}

fn check_points(points: &Tensor, d_x: usize) -> Result<()> {
    if points.shape().len() != 2 || points.cols() != d_x {
        return Err(Error::Shape {
            kernel: "points",
            detail: format!("expected N x {d_x}, got {:?}", points.shape()),
        });
    }
    Ok(())
}

/// Per-point `h` and `u` encodings.
#[derive(Debug, Clone)]
pub struct PointEncodings {
    pub h: Tensor,
    pub u: Tensor,
}

impl PointEncodings {
    pub fn len(&self) -> usize {
        self.h.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn add_into(acc: &mut [f64], x: &[f64]) {
    acc.iter_mut().zip(x).for_each(|(a, b)| *a += b);
}

fn sub_into(acc: &mut [f64], x: &[f64]) {
    acc.iter_mut().zip(x).for_each(|(a, b)| *a -= b);
}

/// A prefix assignment `(order, c[..n])` with incrementally maintained sums.
#[derive(Debug, Clone)]
pub struct ClusterState {
    order: Vec<usize>,
    labels: Vec<usize>,
    h_sums: Vec<Vec<f64>>,
    g_values: Vec<Vec<f64>>,
    g_total: Vec<f64>,
    unassigned_u: Vec<f64>,
    online: bool,
}

impl ClusterState {
    /// Empty prefix over the visiting order `order`.
    pub fn new(params: &ModelParams, enc: &PointEncodings, order: Vec<usize>) -> Result<Self> {
        check_order(&order, enc.len())?;
        let mut unassigned_u = vec![0.0; params.config.d_u];
        for &i in &order {
            add_into(&mut unassigned_u, enc.u.row(i));
        }
        Ok(Self {
            order,
            labels: Vec::new(),
            h_sums: Vec::new(),
            g_values: Vec::new(),
            g_total: vec![0.0; params.config.d_g],
            unassigned_u,
            online: params.config.online_mode,
        })
    }

    /// Rebuilds a prefix from scratch (no incremental updates).
    pub fn from_labels(params: &ModelParams, enc: &PointEncodings, order: Vec<usize>, labels: &[usize]) -> Result<Self> {
        check_order(&order, enc.len())?;
        check_canonical(labels)?;
        if labels.len() > order.len() {
            return Err(Error::Labels(format!("{} labels for {} points", labels.len(), order.len())));
        }
        let k = crate::partitions::num_clusters(labels);
        let mut h_sums = vec![vec![0.0; params.config.d_h]; k];
        for (m, &c) in labels.iter().enumerate() {
            add_into(&mut h_sums[c], enc.h.row(order[m]));
        }
        let mut unassigned_u = vec![0.0; params.config.d_u];
        for &i in &order[labels.len()..] {
            add_into(&mut unassigned_u, enc.u.row(i));
        }
        let (g_values, g_total) = if k > 0 {
            let gv = params.g.forward_plain(&Tensor::from_rows(&h_sums)?)?;
            let rows: Vec<Vec<f64>> = (0..k).map(|r| gv.row(r).to_vec()).collect();
            let mut total = vec![0.0; params.config.d_g];
            rows.iter().for_each(|r| add_into(&mut total, r));
            (rows, total)
        } else {
            (Vec::new(), vec![0.0; params.config.d_g])
        };
        Ok(Self {
            order,
            labels: labels.to_vec(),
            h_sums,
            g_values,
            g_total,
            unassigned_u,
            online: params.config.online_mode,
        })
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Prefix length `n`.
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_points(&self) -> usize {
        self.order.len()
    }

    pub fn is_complete(&self) -> bool {
        self.labels.len() == self.order.len()
    }

    pub fn num_clusters(&self) -> usize {
        self.h_sums.len()
    }

    pub fn h_sums(&self) -> &[Vec<f64>] {
        &self.h_sums
    }

    /// Sum of `u` over the points after the prefix (kept even in online mode).
    pub fn unassigned_u(&self) -> &[f64] {
        &self.unassigned_u
    }

    /// `(G, U)` as used by the energy head.
    pub fn encoding(&self) -> (Vec<f64>, Vec<f64>) {
        let u = if self.online || self.is_complete() {
            vec![0.0; self.unassigned_u.len()]
        } else {
            self.unassigned_u.clone()
        };
        (self.g_total.clone(), u)
    }

    pub fn energy(&self, params: &ModelParams) -> Result<f64> {
        let (g, u) = self.encoding();
        params.energy_from_encoding(&g, &u)
    }

    /// Appends the next point of the order to cluster `label` (0-based;
    /// `label == K` opens a new cluster).
    pub fn assign(&mut self, params: &ModelParams, enc: &PointEncodings, label: usize) -> Result<()> {
        if self.is_complete() {
            return Err(Error::Labels("all points are already assigned".into()));
        }
        let k = self.num_clusters();
        if label > k {
            return Err(Error::Labels(format!("label {label} exceeds the next free cluster {k}")));
        }
        let point = self.order[self.labels.len()];
        if label == k {
            self.h_sums.push(vec![0.0; params.config.d_h]);
            self.g_values.push(vec![0.0; params.config.d_g]);
        }
        add_into(&mut self.h_sums[label], enc.h.row(point));
        let new_g = params.g.forward_plain_row(&self.h_sums[label])?;
        sub_into(&mut self.g_total, &self.g_values[label]);
        add_into(&mut self.g_total, &new_g);
        self.g_values[label] = new_g;
        sub_into(&mut self.unassigned_u, enc.u.row(point));
        self.labels.push(label);
        Ok(())
    }

    /// Energies of the `K + 1` one-step extensions of this prefix.
    pub fn candidate_energies(&self, params: &ModelParams, enc: &PointEncodings) -> Result<Vec<f64>> {
        if self.is_complete() {
            return Err(Error::Labels("no unassigned point left".into()));
        }
        let k = self.num_clusters();
        let point = self.order[self.labels.len()];
        let hx = enc.h.row(point);
        let mut rows: Vec<Vec<f64>> = self.h_sums.iter().map(|hs| hs.iter().zip(hx).map(|(a, b)| a + b).collect()).collect();
        rows.push(hx.to_vec());
        let g_new = params.g.forward_plain(&Tensor::from_rows(&rows)?)?;
        let last_step = self.labels.len() + 1 == self.order.len();
        let u: Vec<f64> = if self.online || last_step {
            vec![0.0; self.unassigned_u.len()]
        } else {
            self.unassigned_u.iter().zip(enc.u.row(point)).map(|(a, b)| a - b).collect()
        };
        let mut inputs = Vec::with_capacity(k + 1);
        for j in 0..=k {
            let mut g = self.g_total.clone();
            if j < k {
                sub_into(&mut g, &self.g_values[j]);
            }
            add_into(&mut g, g_new.row(j));
            g.extend_from_slice(&u);
            inputs.push(g);
        }
        let e = params.f.forward_plain(&Tensor::from_rows(&inputs)?)?;
        Ok(e.into_data())
    }
}

fn check_order(order: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if order.len() != n || order.iter().any(|&i| i >= n || std::mem::replace(&mut seen[i], true)) {
        return Err(Error::Labels(format!("order is not a permutation of 0..{n}")));
    }
    Ok(())
}

/// Differentiable `(G, U)` for a prefix, rebuilt from scratch on `tape`.
pub fn encode_state<'t>(pv: &ParamVars<'t>, points: Var<'t>, order: &[usize], labels: &[usize]) -> Result<(Var<'t>, Var<'t>)> {
    let n_points = points.value().rows();
    check_order(order, n_points)?;
    check_canonical(labels)?;
    if labels.is_empty() || labels.len() > n_points {
        return Err(Error::Labels(format!("prefix length {} outside 1..={n_points}", labels.len())));
    }
    let tape = points.tape();
    let points = pv.scale_input(points)?;
    let k = crate::partitions::num_clusters(labels);
    let mut members = vec![Vec::new(); k];
    for (m, &c) in labels.iter().enumerate() {
        members[c].push(order[m]);
    }
    let hx = pv.h.forward(points)?;
    let h_sums = hx.gather_sum(members.into())?;
    let g = pv.g.forward(h_sums)?.sum_axis(0)?;
    let rest: Vec<usize> = order[labels.len()..].to_vec();
    let u = if pv.online_mode || rest.is_empty() {
        tape.constant(Tensor::zeros(vec![1, pv.d_u]))
    } else {
        pv.u.forward(points)?.gather_sum(vec![rest].into())?
    };
    Ok((g, u))
}

/// Differentiable energy of a prefix, rebuilt from scratch.
pub fn energy<'t>(pv: &ParamVars<'t>, points: Var<'t>, order: &[usize], labels: &[usize]) -> Result<Var<'t>> {
    let (g, u) = encode_state(pv, points, order, labels)?;
    pv.f.forward(Var::concat(&[g, u])?)?.sum()
}

/// Row layout of [`trajectory_energies`]: step `n` (assigning the `n`-th
/// point of the order) owns rows `offsets[n]..offsets[n + 1]`, one per
/// candidate label `0..=K_n`.
#[derive(Debug, Clone)]
pub struct StepLayout {
    pub offsets: Rc<[usize]>,
    /// Row of the candidate actually taken at each step.
    pub chosen: Vec<usize>,
}

impl StepLayout {
    pub fn from_labels(labels: &[usize]) -> Result<Self> {
        check_canonical(labels)?;
        let mut offsets = Vec::with_capacity(labels.len() + 1);
        let mut chosen = Vec::with_capacity(labels.len());
        offsets.push(0);
        let mut k = 0;
        for &c in labels {
            let start = *offsets.last().unwrap();
            chosen.push(start + c);
            offsets.push(start + k + 1);
            if c == k {
                k += 1;
            }
        }
        Ok(Self { offsets: offsets.into(), chosen })
    }

    pub fn num_steps(&self) -> usize {
        self.chosen.len()
    }

    pub fn num_rows(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    pub fn step_rows(&self, step: usize) -> std::ops::Range<usize> {
        self.offsets[step]..self.offsets[step + 1]
    }
}

/// Energies of every candidate extension along the trajectory that visits
/// the points in `order` and assigns `labels` (canonical, in visiting
/// order). Row `offsets[n] + j` holds `E[c_{1:n-1}, j]`; the taken rows are
/// the prefix energies `E[c_{1:n}]`. Output is `M x 1`.
pub fn trajectory_energies<'t>(
    pv: &ParamVars<'t>,
    points: Var<'t>,
    order: &[usize],
    labels: &[usize],
) -> Result<(Var<'t>, StepLayout)> {
    let n = points.value().rows();
    check_order(order, n)?;
    if labels.len() != n {
        return Err(Error::Labels(format!("{} labels for {n} points", labels.len())));
    }
    let layout = StepLayout::from_labels(labels)?;
    let tape = points.tape();
    let m = layout.num_rows();

    let mut h_groups: Vec<Vec<usize>> = Vec::with_capacity(m);
    let mut g_groups: Vec<Vec<usize>> = Vec::with_capacity(m);
    let mut step_of_row = Vec::with_capacity(m);
    let mut members: Vec<Vec<usize>> = Vec::new();
    let mut current_row: Vec<usize> = Vec::new();
    for (step, &c) in labels.iter().enumerate() {
        let k = members.len();
        let base = layout.offsets[step];
        for j in 0..=k {
            let mut hg = members.get(j).cloned().unwrap_or_default();
            hg.push(step);
            h_groups.push(hg);
            let mut gg: Vec<usize> = (0..k).filter(|&q| q != j).map(|q| current_row[q]).collect();
            gg.push(base + j);
            g_groups.push(gg);
            step_of_row.push(step);
        }
        if c == k {
            members.push(Vec::new());
            current_row.push(0);
        }
        members[c].push(step);
        current_row[c] = base + c;
    }

    let x_ordered = pv.scale_input(points.gather_rows(order)?)?;
    let hx = pv.h.forward(x_ordered)?;
    let h_sums = hx.gather_sum(h_groups.into())?;
    let g_rows = pv.g.forward(h_sums)?;
    let g = g_rows.gather_sum(g_groups.into())?;
    let u = if pv.online_mode {
        tape.constant(Tensor::zeros(vec![m, pv.d_u]))
    } else {
        let ux = pv.u.forward(x_ordered)?;
        let suffix: Vec<Vec<usize>> = (0..n).map(|s| (s + 1..n).collect()).collect();
        ux.gather_sum(suffix.into())?.gather_rows(&step_of_row)?
    };
    let e = pv.f.forward(Var::concat(&[g, u])?)?;
    Ok((e, layout))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partitions::canonicalize;
    use rand::seq::SliceRandom;

    fn small_config() -> EncoderConfig {
        EncoderConfig {
            d_x: 2,
            d_h: 5,
            d_g: 6,
            d_u: 4,
            h_hidden: vec![7],
            g_hidden: vec![7],
            u_hidden: vec![7],
            f_hidden: vec![8],
            activation: Activation::Tanh,
            online_mode: false,
            input_scale: 0.5,
        }
    }

    fn random_points(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::matrix(n, 2, (0..2 * n).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap()
    }

    fn random_labels(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let raw: Vec<usize> = (0..n).map(|_| rng.gen_range(0..4)).collect();
        canonicalize(&raw)
    }

    fn scratch_energy(params: &ModelParams, points: &Tensor, order: &[usize], labels: &[usize]) -> f64 {
        let tape = Tape::new();
        let pv = params.register(&tape, false);
        let x = tape.constant(points.clone());
        energy(&pv, x, order, labels).unwrap().item()
    }

    #[test]
    fn standard_config_shapes() {
        let p = ModelParams::init(&EncoderConfig::standard(2), 0).unwrap();
        assert_eq!(p.f.input_dim(), 384);
        assert_eq!(p.f.output_dim(), 1);
        assert_eq!(p.h.layers.len(), 3);
        assert_eq!(p.g.output_dim(), 256);
    }

    #[test]
    fn zero_dimension_is_rejected() {
        let mut c = small_config();
        c.d_g = 0;
        assert!(ModelParams::init(&c, 0).is_err());
    }

    #[test]
    fn full_assignment_has_zero_u() {
        let params = ModelParams::init(&small_config(), 1).unwrap();
        let points = random_points(4, 2);
        let tape = Tape::new();
        let pv = params.register(&tape, false);
        let x = tape.constant(points);
        let (_, u) = encode_state(&pv, x, &[0, 1, 2, 3], &[0, 1, 0, 1]).unwrap();
        assert!(u.value().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn symmetric_under_within_cluster_and_label_swaps() {
        let params = ModelParams::init(&small_config(), 3).unwrap();
        let points = random_points(6, 4);
        let order = vec![0, 1, 2, 3, 4, 5];
        // Clusters {0, 2, 3} and {1, 4}; point 5 unassigned.
        let base = scratch_energy(&params, &points, &order, &[0, 1, 0, 0, 1]);
        // Same partition, prefix visited in a different order.
        let swapped = scratch_energy(&params, &points, &[3, 4, 2, 0, 1, 5], &[0, 1, 0, 0, 1]);
        assert!((base - swapped).abs() < 1e-9);
        // Different canonical labels, same partition: visit {1,4} first.
        let relabeled = scratch_energy(&params, &points, &[1, 0, 2, 3, 4, 5], &[0, 1, 1, 1, 0]);
        assert!((base - relabeled).abs() < 1e-9);
    }

    #[test]
    fn online_mode_ignores_unassigned_points() {
        let mut cfg = small_config();
        cfg.online_mode = true;
        let params = ModelParams::init(&cfg, 5).unwrap();
        let mut points = random_points(5, 6);
        let order = vec![0, 1, 2, 3, 4];
        let before = scratch_energy(&params, &points, &order, &[0, 1, 0]);
        points.data_mut()[8] += 10.0;
        points.data_mut()[7] -= 3.0;
        let after = scratch_energy(&params, &points, &order, &[0, 1, 0]);
        assert_eq!(before, after);
    }

    #[test]
    fn incremental_matches_scratch_after_50_assignments() {
        let params = ModelParams::init(&small_config(), 7).unwrap();
        let points = random_points(50, 8);
        let enc = params.encode_points(&points).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut order: Vec<usize> = (0..50).collect();
        order.shuffle(&mut rng);
        let mut state = ClusterState::new(&params, &enc, order.clone()).unwrap();
        for step in 0..50 {
            let k = state.num_clusters();
            let label = if step == 0 { 0 } else { rng.gen_range(0..=k) };
            state.assign(&params, &enc, label).unwrap();
            assert_eq!(state.num_clusters(), if label == k { k + 1 } else { k });
            assert_eq!(state.len() + (state.num_points() - state.len()), 50);
        }
        let rebuilt = ClusterState::from_labels(&params, &enc, order.clone(), state.labels()).unwrap();
        for (a, b) in state.h_sums().iter().zip(rebuilt.h_sums()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-9);
            }
        }
        let (g1, _) = state.encoding();
        let (g2, _) = rebuilt.encoding();
        assert!(g1.iter().zip(&g2).all(|(a, b)| (a - b).abs() < 1e-9));
        let e = scratch_energy(&params, &points, &order, state.labels());
        assert!((state.energy(&params).unwrap() - e).abs() < 1e-9);
    }

    #[test]
    fn assigning_beyond_next_cluster_fails() {
        let params = ModelParams::init(&small_config(), 1).unwrap();
        let points = random_points(3, 1);
        let enc = params.encode_points(&points).unwrap();
        let mut state = ClusterState::new(&params, &enc, vec![0, 1, 2]).unwrap();
        assert!(state.assign(&params, &enc, 1).is_err());
        state.assign(&params, &enc, 0).unwrap();
        assert!(state.assign(&params, &enc, 2).is_err());
    }

    #[test]
    fn non_canonical_prefix_is_rejected() {
        let params = ModelParams::init(&small_config(), 1).unwrap();
        let points = random_points(3, 1);
        let tape = Tape::new();
        let pv = params.register(&tape, false);
        let x = tape.constant(points);
        assert!(encode_state(&pv, x, &[0, 1, 2], &[0, 2]).is_err());
    }

    #[test]
    fn batched_energies_match_sequential_candidates() {
        for online in [false, true] {
            let mut cfg = small_config();
            cfg.online_mode = online;
            let params = ModelParams::init(&cfg, 11).unwrap();
            let points = random_points(9, 12);
            let enc = params.encode_points(&points).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(13);
            let labels = random_labels(9, &mut rng);
            let mut order: Vec<usize> = (0..9).collect();
            order.shuffle(&mut rng);

            let tape = Tape::new();
            let pv = params.register(&tape, false);
            let x = tape.constant(points.clone());
            let (e, layout) = trajectory_energies(&pv, x, &order, &labels).unwrap();
            let e = e.value();

            let mut state = ClusterState::new(&params, &enc, order.clone()).unwrap();
            for (step, &c) in labels.iter().enumerate() {
                let cand = state.candidate_energies(&params, &enc).unwrap();
                let rows = layout.step_rows(step);
                assert_eq!(cand.len(), rows.len());
                for (j, r) in rows.enumerate() {
                    assert!((cand[j] - e.data()[r]).abs() < 1e-9, "step {step} cand {j}");
                }
                state.assign(&params, &enc, c).unwrap();
                let scratch = scratch_energy(&params, &points, &order, &labels[..=step]);
                assert!((e.data()[layout.chosen[step]] - scratch).abs() < 1e-9);
            }
        }
    }
}
