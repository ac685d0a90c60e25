//! The demonstration-conditioned policy: a shared per-step encoder, a temporal
//! convolution embedding head and a Gaussian action head.

mod losses;
mod train;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::expert::{Controller, Trajectory};
use crate::seeding::Rng;
use crate::world::{Action, Scene, World, WorldState, ACTION_DIM, EFFECTOR_DIMS, FEATURE_DIM, SLOT_DIMS};

pub use losses::{
    contrastive_from_embeddings, loss_bc, loss_contrastive, loss_oil, loss_total, minibatch_loss, nll,
    sample_minibatch, LossParts, LossValue, Minibatch,
};
pub use train::{train, CurvePoint, Objective, TrainConfig};
#[cfg(test)]
pub(crate) use train::train_observed;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
const MIN_EMBEDDING_NORM: f64 = 1e-8;

/// What the shared per-step encoder sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderInput {
    /// The whole observation vector, one row per step.
    Flat,
    /// One row per object slot: effector height and aperture, the slot's own fields
    /// and its offset from the effector. Encodings are summed over present slots.
    Slots,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub encoder_input: EncoderInput,
    pub encoder_width: usize,
    pub conv_channels: usize,
    pub conv_kernel: usize,
    pub conv_stride: usize,
    pub embed_dim: usize,
    pub policy_width: usize,
    pub log_std_init: f64,
    /// Multiplier on the initial output-layer weights, so initial means are small
    /// relative to the action box.
    pub output_init_scale: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            encoder_input: EncoderInput::Slots,
            encoder_width: 32,
            conv_channels: 32,
            conv_kernel: 5,
            conv_stride: 2,
            embed_dim: 16,
            policy_width: 64,
            log_std_init: -2.0,
            output_init_scale: 0.1,
        }
    }
}

/// Width of one encoder row in slot mode.
const SLOT_INPUT: usize = 2 + SLOT_DIMS + 2;

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("network.encoder_width", self.encoder_width),
            ("network.conv_channels", self.conv_channels),
            ("network.conv_kernel", self.conv_kernel),
            ("network.conv_stride", self.conv_stride),
            ("network.embed_dim", self.embed_dim),
            ("network.policy_width", self.policy_width),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !(LOG_STD_MIN..=LOG_STD_MAX).contains(&self.log_std_init) {
            return Err(Error::config("network.log_std_init", format!("must lie in [{LOG_STD_MIN}, {LOG_STD_MAX}]")));
        }
        if !(self.output_init_scale.is_finite() && self.output_init_scale > 0.0) {
            return Err(Error::config("network.output_init_scale", "must be positive"));
        }
        Ok(())
    }

    fn padding(&self) -> usize {
        self.conv_kernel / 2
    }

    /// Width of one encoder input row for observations of width `obs_dim`.
    pub fn input_dim(&self, obs_dim: usize) -> usize {
        match self.encoder_input {
            EncoderInput::Flat => obs_dim,
            EncoderInput::Slots => SLOT_INPUT,
        }
    }

    /// Encoder rows per observation.
    fn rows_per_step(&self, obs_dim: usize) -> usize {
        match self.encoder_input {
            EncoderInput::Flat => 1,
            EncoderInput::Slots => (obs_dim - EFFECTOR_DIMS) / SLOT_DIMS,
        }
    }

    /// Appends the encoder rows for one observation and, per row, the weight its
    /// encoding carries in the per-step sum. With `mask`, everything derived from
    /// the effector is zeroed.
    fn push_rows(&self, obs: &[f64], mask: bool, rows: &mut Vec<f64>, weights: &mut Vec<f64>) {
        match self.encoder_input {
            EncoderInput::Flat => {
                let start = rows.len();
                rows.extend_from_slice(obs);
                if mask {
                    rows[start..start + EFFECTOR_DIMS].fill(0.0);
                }
                weights.push(1.0);
            }
            EncoderInput::Slots => {
                for s in 0..self.rows_per_step(obs.len()) {
                    let base = EFFECTOR_DIMS + s * SLOT_DIMS;
                    let fields = &obs[base..base + SLOT_DIMS];
                    let present = fields[0];
                    if mask {
                        rows.extend_from_slice(&[0.0, 0.0]);
                    } else {
                        rows.extend_from_slice(&obs[2..4]);
                    }
                    rows.extend_from_slice(fields);
                    if mask {
                        rows.extend_from_slice(&[0.0, 0.0]);
                    } else {
                        rows.push(present * (fields[1 + FEATURE_DIM] - obs[0]));
                        rows.push(present * (fields[2 + FEATURE_DIM] - obs[1]));
                    }
                    weights.push(present);
                }
            }
        }
    }

    /// Effector-masked encoder rows of one object slot over a whole trajectory, or
    /// `None` if the slot is empty.
    fn slot_sequence(&self, traj: &Trajectory, slot: usize) -> Option<Tensor> {
        let base = EFFECTOR_DIMS + slot * SLOT_DIMS;
        if traj.observation(0)[base] == 0.0 {
            return None;
        }
        let mut rows = Vec::with_capacity(traj.len() * SLOT_INPUT);
        for t in 0..traj.len() {
            rows.extend_from_slice(&[0.0, 0.0]);
            rows.extend_from_slice(&traj.observation(t)[base..base + SLOT_DIMS]);
            rows.extend_from_slice(&[0.0, 0.0]);
        }
        Some(Tensor::new(vec![traj.len(), SLOT_INPUT], rows).expect("trajectory shape"))
    }

    /// Encoder rows for a whole trajectory plus the `[rows, 1]` pooling weights.
    fn inputs(&self, traj: &Trajectory, mask: bool) -> (Tensor, Tensor) {
        let rows_per_step = self.rows_per_step(traj.obs_dim());
        let n = traj.len() * rows_per_step;
        let mut rows = Vec::with_capacity(n * self.input_dim(traj.obs_dim()));
        let mut weights = Vec::with_capacity(n);
        for t in 0..traj.len() {
            self.push_rows(traj.observation(t), mask, &mut rows, &mut weights);
        }
        (
            Tensor::new(vec![n, self.input_dim(traj.obs_dim())], rows).expect("trajectory shape"),
            Tensor::new(vec![n, 1], weights).expect("trajectory shape"),
        )
    }
}

/// Index of each tensor in [`ModelParams::tensors`].
pub(crate) mod slot {
    pub const ENC_W1: usize = 0;
    pub const ENC_B1: usize = 1;
    pub const ENC_W2: usize = 2;
    pub const ENC_B2: usize = 3;
    pub const CONV1_W: usize = 4;
    pub const CONV1_B: usize = 5;
    pub const CONV2_W: usize = 6;
    pub const CONV2_B: usize = 7;
    pub const EMB_W: usize = 8;
    pub const EMB_B: usize = 9;
    pub const POL_WF: usize = 10;
    pub const POL_WE: usize = 11;
    pub const POL_B1: usize = 12;
    pub const POL_W2: usize = 13;
    pub const POL_B2: usize = 14;
    pub const POL_W3: usize = 15;
    pub const POL_B3: usize = 16;
    pub const LOG_STD: usize = 17;
    pub const COUNT: usize = 18;
}

pub const PARAM_NAMES: [&str; slot::COUNT] = [
    "encoder.w1",
    "encoder.b1",
    "encoder.w2",
    "encoder.b2",
    "embed.conv1.w",
    "embed.conv1.b",
    "embed.conv2.w",
    "embed.conv2.b",
    "embed.out.w",
    "embed.out.b",
    "policy.w1_features",
    "policy.w1_embedding",
    "policy.b1",
    "policy.w2",
    "policy.b2",
    "policy.w3",
    "policy.b3",
    "policy.log_std",
];

/// All learnable weights. The per-step encoder is shared by the embedding and policy
/// heads. The first policy layer acting on `[features ++ embedding]` is stored as two
/// blocks so the embedding term can be added once per trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: NetworkConfig,
    pub obs_dim: usize,
    pub tensors: Vec<Tensor>,
}

impl ModelParams {
    pub fn init(config: NetworkConfig, obs_dim: usize, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        check_obs_dim(&config, obs_dim)?;
        let shapes = Self::shapes(&config, obs_dim);
        let mut tensors = Vec::with_capacity(slot::COUNT);
        for (i, shape) in shapes.iter().enumerate() {
            let t = match i {
                slot::LOG_STD => Tensor::full(shape, config.log_std_init),
                slot::ENC_W1 | slot::ENC_W2 | slot::EMB_W | slot::POL_WF | slot::POL_WE | slot::POL_W2 => {
                    glorot(shape, shape[0], shape[1], 1.0, rng)
                }
                slot::POL_W3 => glorot(shape, shape[0], shape[1], config.output_init_scale, rng),
                slot::CONV1_W | slot::CONV2_W => {
                    glorot(shape, shape[0] * shape[1], shape[0] * shape[2], 1.0, rng)
                }
                _ => Tensor::zeros(shape),
            };
            tensors.push(t);
        }
        Ok(ModelParams {
            config,
            obs_dim,
            tensors,
        })
    }

    pub fn shapes(config: &NetworkConfig, obs_dim: usize) -> Vec<Vec<usize>> {
        let (h, c, k, e, p) = (
            config.encoder_width,
            config.conv_channels,
            config.conv_kernel,
            config.embed_dim,
            config.policy_width,
        );
        vec![
            vec![config.input_dim(obs_dim), h],
            vec![h],
            vec![h, h],
            vec![h],
            vec![k, h, c],
            vec![c],
            vec![k, c, c],
            vec![c],
            vec![c, e],
            vec![e],
            vec![h, p],
            vec![e, p],
            vec![p],
            vec![p, p],
            vec![p],
            vec![p, ACTION_DIM],
            vec![ACTION_DIM],
            vec![ACTION_DIM],
        ]
    }

    pub fn from_tensors(config: NetworkConfig, obs_dim: usize, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        check_obs_dim(&config, obs_dim)?;
        let shapes = Self::shapes(&config, obs_dim);
        if tensors.len() != shapes.len() {
            return Err(Error::InvalidTensor(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for ((t, s), name) in tensors.iter().zip(&shapes).zip(PARAM_NAMES) {
            if t.shape() != s.as_slice() {
                return Err(Error::InvalidTensor(format!(
                    "{name}: shape {:?}, expected {s:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::NonFinite { op: "load_params" });
            }
        }
        Ok(ModelParams {
            config,
            obs_dim,
            tensors,
        })
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Registers every tensor as a trainable leaf, in slot order.
    pub(crate) fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            ids: self.tensors.iter().map(|t| g.param(t.clone())).collect(),
            config: self.config,
        }
    }

    fn t(&self, slot: usize) -> &[f64] {
        self.tensors[slot].data()
    }
}

fn check_obs_dim(config: &NetworkConfig, obs_dim: usize) -> Result<()> {
    if obs_dim <= EFFECTOR_DIMS {
        return Err(Error::config("network.obs_dim", format!("{obs_dim} leaves no object channels")));
    }
    if config.encoder_input == EncoderInput::Slots && (obs_dim - EFFECTOR_DIMS) % SLOT_DIMS != 0 {
        return Err(Error::config(
            "network.encoder_input",
            format!("observation width {obs_dim} is not effector plus whole object slots"),
        ));
    }
    Ok(())
}

fn glorot(shape: &[usize], fan_in: usize, fan_out: usize, scale: f64, rng: &mut Rng) -> Tensor {
    let limit = scale * (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-limit..=limit)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape from config")
}

/// Parameters bound into one graph.
pub(crate) struct Bound {
    pub ids: Vec<NodeId>,
    config: NetworkConfig,
}

impl Bound {
    pub fn id(&self, slot: usize) -> NodeId {
        self.ids[slot]
    }

    /// Encoder features for every input row of a trajectory, plus the row weights
    /// used when pooling rows back to steps.
    fn encode_rows(&self, g: &mut Graph, traj: &Trajectory, mask: bool) -> Result<(NodeId, NodeId)> {
        let (rows, weights) = self.config.inputs(traj, mask);
        let x = g.constant(rows);
        let h = self.mlp_encoder(g, x)?;
        Ok((h, g.constant(weights)))
    }

    fn mlp_encoder(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let h = g.matmul(x, self.id(slot::ENC_W1))?;
        let h = g.bias_add(h, self.id(slot::ENC_B1))?;
        let h = g.relu(h)?;
        let h = g.matmul(h, self.id(slot::ENC_W2))?;
        let h = g.bias_add(h, self.id(slot::ENC_B2))?;
        g.relu(h)
    }

    /// Weighted sum of row activations back to one row per step.
    fn pool(&self, g: &mut Graph, h: NodeId, weights: NodeId, obs_dim: usize) -> Result<NodeId> {
        match self.config.encoder_input {
            EncoderInput::Flat => Ok(h),
            EncoderInput::Slots => {
                let h = g.row_scale(h, weights)?;
                g.group_sum(h, self.config.rows_per_step(obs_dim))
            }
        }
    }

    /// `[1, E]` embedding of a trajectory.
    ///
    /// In slot mode each present object's sequence goes through the convolutions on
    /// its own and the time-pooled results are summed over objects.
    pub fn embed(&self, g: &mut Graph, traj: &Trajectory) -> Result<NodeId> {
        let pooled = match self.config.encoder_input {
            EncoderInput::Flat => {
                let (rows, _) = self.encode_rows(g, traj, true)?;
                self.temporal(g, rows)?
            }
            EncoderInput::Slots => {
                let mut per_object = Vec::new();
                for s in 0..self.config.rows_per_step(traj.obs_dim()) {
                    if let Some(seq) = self.config.slot_sequence(traj, s) {
                        let x = g.constant(seq);
                        let h = self.mlp_encoder(g, x)?;
                        per_object.push(self.temporal(g, h)?);
                    }
                }
                g.add_all(&per_object)?
            }
        };
        let e = g.matmul(pooled, self.id(slot::EMB_W))?;
        g.bias_add(e, self.id(slot::EMB_B))
    }

    /// Two strided convolutions over a `[T, encoder_width]` sequence, mean-pooled
    /// over time to `[1, conv_channels]`.
    fn temporal(&self, g: &mut Graph, feats: NodeId) -> Result<NodeId> {
        let (stride, pad) = (self.config.conv_stride, self.config.padding());
        let c = g.conv1d(feats, self.id(slot::CONV1_W), self.id(slot::CONV1_B), stride, pad)?;
        let c = g.relu(c)?;
        let c = g.conv1d(c, self.id(slot::CONV2_W), self.id(slot::CONV2_B), stride, pad)?;
        let c = g.relu(c)?;
        g.mean_rows(c)
    }

    /// Summed action NLL of `traj` under the policy conditioned on `embedding`
    /// (`None` = zero embedding).
    pub fn trajectory_nll(&self, g: &mut Graph, traj: &Trajectory, embedding: Option<NodeId>) -> Result<NodeId> {
        let target = g.constant(Tensor::new(vec![traj.len(), ACTION_DIM], traj.actions().to_vec()).expect("trajectory shape"));
        let (feats, weights) = self.encode_rows(g, traj, false)?;
        let cond = match embedding {
            Some(e) => {
                let we = g.matmul(e, self.id(slot::POL_WE))?;
                g.bias_add(we, self.id(slot::POL_B1))?
            }
            None => self.id(slot::POL_B1),
        };
        let h = g.matmul(feats, self.id(slot::POL_WF))?;
        let h = g.bias_add(h, cond)?;
        let h = g.relu(h)?;
        let h = g.matmul(h, self.id(slot::POL_W2))?;
        let h = g.bias_add(h, self.id(slot::POL_B2))?;
        let h = g.relu(h)?;
        let h = self.pool(g, h, weights, traj.obs_dim())?;
        let mean = g.matmul(h, self.id(slot::POL_W3))?;
        let mean = g.bias_add(mean, self.id(slot::POL_B3))?;
        let log_std = g.clamp(self.id(slot::LOG_STD), LOG_STD_MIN, LOG_STD_MAX)?;
        g.gaussian_nll(mean, log_std, target)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    values: Vec<f64>,
    norm: f64,
}

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "embed" });
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < MIN_EMBEDDING_NORM {
            return Err(Error::DegenerateEmbedding(norm));
        }
        Ok(Embedding { values, norm })
    }

    /// The all-zero conditioning used by unconditioned behavior cloning.
    pub fn zeros(dim: usize) -> Self {
        Embedding {
            values: vec![0.0; dim],
            norm: 0.0,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Normalized dot product. Zero if either side has zero norm.
    pub fn cosine(&self, other: &Embedding) -> f64 {
        if self.norm == 0.0 || other.norm == 0.0 {
            return 0.0;
        }
        let dot: f64 = self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum();
        dot / (self.norm * other.norm)
    }

    pub fn scaled(&self, c: f64) -> Result<Embedding> {
        Embedding::new(self.values.iter().map(|v| v * c).collect())
    }
}

pub fn embed(params: &ModelParams, traj: &Trajectory) -> Result<Embedding> {
    if traj.is_empty() {
        return Err(Error::EmptyInput("embed"));
    }
    if traj.obs_dim() != params.obs_dim {
        return Err(Error::Shape {
            op: "embed",
            lhs: vec![traj.obs_dim()],
            rhs: vec![params.obs_dim],
        });
    }
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let e = bound.embed(&mut g, traj)?;
    Embedding::new(g.value(e).data().to_vec())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionDistribution {
    pub mean: Action,
    pub log_std: Action,
}

impl ActionDistribution {
    pub fn greedy(&self) -> Action {
        self.mean
    }

    pub fn sample(&self, rng: &mut Rng) -> Action {
        let mut a = self.mean;
        for (v, s) in a.iter_mut().zip(self.log_std) {
            let z: f64 = StandardNormal.sample(rng);
            *v += s.exp() * z;
        }
        a
    }
}

pub fn greedy_action(dist: &ActionDistribution) -> Action {
    dist.greedy()
}

pub fn sample_action(dist: &ActionDistribution, rng: &mut Rng) -> Action {
    dist.sample(rng)
}

/// Policy head evaluated without a graph. The embedding contribution to the first
/// layer is folded into its bias once, up front.
#[derive(Clone, Debug)]
pub struct PolicyRunner<'a> {
    params: &'a ModelParams,
    first_bias: Vec<f64>,
    log_std: Action,
}

impl<'a> PolicyRunner<'a> {
    pub fn new(params: &'a ModelParams, embedding: &[f64]) -> Result<Self> {
        let e = params.config.embed_dim;
        let p = params.config.policy_width;
        if embedding.len() != e {
            return Err(Error::Shape {
                op: "policy_forward",
                lhs: vec![embedding.len()],
                rhs: vec![e],
            });
        }
        let mut first_bias = params.t(slot::POL_B1).to_vec();
        let we = params.t(slot::POL_WE);
        for (i, &ev) in embedding.iter().enumerate() {
            if ev != 0.0 {
                for (b, &w) in first_bias.iter_mut().zip(&we[i * p..(i + 1) * p]) {
                    *b += ev * w;
                }
            }
        }
        let mut log_std = [0.0; ACTION_DIM];
        for (l, &v) in log_std.iter_mut().zip(params.t(slot::LOG_STD)) {
            *l = v.clamp(LOG_STD_MIN, LOG_STD_MAX);
        }
        Ok(PolicyRunner {
            params,
            first_bias,
            log_std,
        })
    }

    pub fn forward(&self, obs: &[f64]) -> Result<ActionDistribution> {
        let p = self.params;
        if obs.len() != p.obs_dim {
            return Err(Error::Shape {
                op: "policy_forward",
                lhs: vec![obs.len()],
                rhs: vec![p.obs_dim],
            });
        }
        let h = p.config.encoder_width;
        let w = p.config.policy_width;
        let width = p.config.input_dim(p.obs_dim);
        let mut rows = Vec::with_capacity(width * p.config.rows_per_step(p.obs_dim));
        let mut weights = Vec::new();
        p.config.push_rows(obs, false, &mut rows, &mut weights);
        let mut h2 = vec![0.0; w];
        for (row, &wt) in rows.chunks(width).zip(&weights) {
            if wt == 0.0 {
                continue;
            }
            let f1 = dense_relu(row, p.t(slot::ENC_W1), p.t(slot::ENC_B1), h);
            let f2 = dense_relu(&f1, p.t(slot::ENC_W2), p.t(slot::ENC_B2), h);
            let h1 = dense_relu(&f2, p.t(slot::POL_WF), &self.first_bias, w);
            for (acc, v) in h2.iter_mut().zip(dense_relu(&h1, p.t(slot::POL_W2), p.t(slot::POL_B2), w)) {
                *acc += wt * v;
            }
        }
        let mut mean = [0.0; ACTION_DIM];
        mean.copy_from_slice(p.t(slot::POL_B3));
        let w3 = p.t(slot::POL_W3);
        for (i, &hv) in h2.iter().enumerate() {
            for (m, &wv) in mean.iter_mut().zip(&w3[i * ACTION_DIM..(i + 1) * ACTION_DIM]) {
                *m += hv * wv;
            }
        }
        if !mean.iter().all(|m| m.is_finite()) {
            return Err(Error::NonFinite { op: "policy_forward" });
        }
        Ok(ActionDistribution {
            mean,
            log_std: self.log_std,
        })
    }
}

fn dense_relu(x: &[f64], w: &[f64], b: &[f64], out: usize) -> Vec<f64> {
    let mut y = b.to_vec();
    for (i, &xv) in x.iter().enumerate() {
        if xv != 0.0 {
            for (yv, &wv) in y.iter_mut().zip(&w[i * out..(i + 1) * out]) {
                *yv += xv * wv;
            }
        }
    }
    for v in &mut y {
        *v = v.max(0.0);
    }
    y
}

pub fn policy_forward(params: &ModelParams, obs: &[f64], embedding: &[f64]) -> Result<ActionDistribution> {
    PolicyRunner::new(params, embedding)?.forward(obs)
}

/// Drives the world with the learned policy for a fixed conditioning embedding.
pub struct LearnedController<'a> {
    runner: PolicyRunner<'a>,
    pub stochastic: bool,
}

impl<'a> LearnedController<'a> {
    pub fn new(params: &'a ModelParams, embedding: &[f64], stochastic: bool) -> Result<Self> {
        Ok(LearnedController {
            runner: PolicyRunner::new(params, embedding)?,
            stochastic,
        })
    }
}

impl Controller for LearnedController<'_> {
    fn act(&mut self, _world: &World, _state: &WorldState, _scene: &Scene, obs: &[f64], rng: &mut Rng) -> Result<Action> {
        let dist = self.runner.forward(obs)?;
        Ok(if self.stochastic { dist.sample(rng) } else { dist.greedy() })
    }
}
