//! Latent task embeddings and the meta-training / adaptation loops.
//!
//! An [`Encoder`] maps a batch of context tuples `(s, a, r, s')` from one task
//! to `z ∈ R³`: every tuple passes through a shared network, the features are
//! mean-pooled, and a head produces either `z` directly (deterministic) or the
//! mean and standard deviation of a diagonal Gaussian that `z` is drawn from
//! by reparameterization (probabilistic). Gradients reach the encoder only
//! through the critic loss and the latent penalty.

use ndarray::{Array2, Axis};
use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ddpg::{Agent, AgentConfig, ReplayBuffer, Transition};
use crate::env::{self, EpisodeState, SetpointSchedule, StateVariant, Task};
use crate::exec;
use crate::nn::{Activation, Gradients, Network, OptimizerConfig, Tape};
use crate::plant::{self, discretize};
use crate::rng::{self, tag};
use crate::{Error, Result};

pub const LATENT_DIM: usize = 3;

/// Floor added to the softplus standard deviation.
const MIN_STD: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EmbeddingMode {
    Deterministic,
    Probabilistic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentRegularizer {
    /// `β·|z|₁` on the sampled latent.
    L1,
    /// `β·KL(N(μ, σ²) ‖ N(0, I))`; deterministic encoders fall back to L1.
    Kl,
}

/// Flattened `(s, a, r, s')`.
pub fn context_tuple(t: &Transition) -> Vec<f64> {
    let mut v = Vec::with_capacity(2 * t.state.len() + 2);
    v.extend_from_slice(&t.state);
    v.push(t.action);
    v.push(t.reward);
    v.extend_from_slice(&t.next_state);
    v
}

pub fn context_tuple_dim(state_dim: usize) -> usize {
    2 * state_dim + 2
}

/// Context tuples from a single task, one per row.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextBatch {
    tuples: Array2<f64>,
}

impl ContextBatch {
    pub fn from_transitions(ts: &[&Transition]) -> Result<Self> {
        let first = ts.first().ok_or(Error::Empty("context"))?;
        let dim = context_tuple_dim(first.state.len());
        let mut tuples = Array2::zeros((ts.len(), dim));
        for (mut row, t) in tuples.axis_iter_mut(Axis(0)).zip(ts) {
            let tuple = context_tuple(t);
            if tuple.len() != dim {
                return Err(Error::Dimension {
                    context: "context tuple",
                    expected: dim,
                    got: tuple.len(),
                });
            }
            row.assign(&ndarray::ArrayView1::from(&tuple[..]));
        }
        Ok(Self { tuples })
    }

    pub fn from_rows(tuples: Array2<f64>) -> Result<Self> {
        if tuples.nrows() == 0 {
            return Err(Error::Empty("context"));
        }
        Ok(Self { tuples })
    }

    /// A single all-zero tuple, used before a task has any experience.
    pub fn placeholder(tuple_dim: usize) -> Self {
        Self {
            tuples: Array2::zeros((1, tuple_dim)),
        }
    }

    pub fn len(&self) -> usize {
        self.tuples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.nrows() == 0
    }

    pub fn tuple_dim(&self) -> usize {
        self.tuples.ncols()
    }

    pub fn rows(&self) -> &Array2<f64> {
        &self.tuples
    }

    /// Rows sorted lexicographically, so pooling sums in an order that does
    /// not depend on how the context was drawn.
    fn canonical(&self) -> Array2<f64> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| {
            let (ra, rb) = (self.tuples.row(a), self.tuples.row(b));
            ra.iter()
                .zip(rb.iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        self.tuples.select(Axis(0), &order)
    }
}

/// Recency sampler: `m` tuples from the `window` most recent insertions,
/// without replacement when the window holds at least `m`, with replacement otherwise.
pub fn sample_context_recent<R: Rng + ?Sized>(
    buffer: &ReplayBuffer,
    m: usize,
    window: usize,
    rng: &mut R,
) -> Result<ContextBatch> {
    if buffer.is_empty() {
        return Err(Error::Empty("replay buffer"));
    }
    if m == 0 {
        return Err(Error::Config("context size must be positive".into()));
    }
    let recent = buffer.recent(window.max(1));
    let picked: Vec<&Transition> = if m <= recent.len() {
        index::sample(rng, recent.len(), m).iter().map(|i| recent[i]).collect()
    } else {
        (0..m).map(|_| recent[rng.random_range(0..recent.len())]).collect()
    };
    ContextBatch::from_transitions(&picked)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentContext {
    pub mode: EmbeddingMode,
    pub z: [f64; LATENT_DIM],
    /// Posterior mean; equals `z` for deterministic embeddings.
    pub mean: [f64; LATENT_DIM],
    /// Posterior std; zero for deterministic embeddings.
    pub std: [f64; LATENT_DIM],
    /// Standard-normal draw behind `z = mean + std ⊙ noise`.
    pub noise: [f64; LATENT_DIM],
}

/// Mean over the batch of `|z|₁`.
pub fn latent_penalty(zs: &[[f64; LATENT_DIM]]) -> f64 {
    if zs.is_empty() {
        return 0.0;
    }
    zs.iter().map(|z| z.iter().map(|v| v.abs()).sum::<f64>()).sum::<f64>() / zs.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub mode: EmbeddingMode,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub regularizer: LatentRegularizer,
}

impl EncoderConfig {
    pub fn new(mode: EmbeddingMode) -> Self {
        Self {
            mode,
            hidden: vec![64, 64],
            feature_dim: 32,
            regularizer: LatentRegularizer::L1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub tuple_net: Network,
    pub head: Network,
}

#[derive(Clone, Debug)]
pub struct EmbedTape {
    tuple_tape: Tape,
    head_tape: Tape,
    latent: LatentContext,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderGrads {
    pub tuple: Gradients,
    pub head: Gradients,
}

impl EncoderGrads {
    pub fn add(&mut self, other: &EncoderGrads) {
        self.tuple.add_scaled(&other.tuple, 1.0);
        self.head.add_scaled(&other.head, 1.0);
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, tuple_dim: usize, rng: &mut R) -> Result<Self> {
        let mut sizes = vec![tuple_dim];
        sizes.extend_from_slice(&config.hidden);
        sizes.push(config.feature_dim);
        let mut acts = vec![Activation::Relu; config.hidden.len()];
        acts.push(Activation::Identity);
        let tuple_net = Network::mlp(&sizes, &acts, rng)?;
        let out = match config.mode {
            EmbeddingMode::Deterministic => LATENT_DIM,
            EmbeddingMode::Probabilistic => 2 * LATENT_DIM,
        };
        let head = Network::mlp(&[config.feature_dim, out], &[Activation::Identity], rng)?;
        Ok(Self {
            config,
            tuple_net,
            head,
        })
    }

    pub fn mode(&self) -> EmbeddingMode {
        self.config.mode
    }

    pub fn tuple_dim(&self) -> usize {
        self.tuple_net.input_dim()
    }

    pub fn zero_grads(&self) -> EncoderGrads {
        EncoderGrads {
            tuple: self.tuple_net.zero_gradients(),
            head: self.head.zero_gradients(),
        }
    }

    /// Embeds `c`; the probabilistic mode draws its noise from `rng`.
    pub fn embed<R: Rng + ?Sized>(&self, c: &ContextBatch, rng: &mut R) -> Result<(LatentContext, EmbedTape)> {
        if c.is_empty() {
            return Err(Error::Empty("context"));
        }
        if c.tuple_dim() != self.tuple_dim() {
            return Err(Error::Dimension {
                context: "context tuple",
                expected: self.tuple_dim(),
                got: c.tuple_dim(),
            });
        }
        let rows = c.canonical();
        let tuple_tape = self.tuple_net.forward(rows.view())?;
        let pooled = tuple_tape
            .output()
            .mean_axis(Axis(0))
            .expect("non-empty context")
            .insert_axis(Axis(0));
        let head_tape = self.head.forward(pooled.view())?;
        let out = head_tape.output().row(0);
        let latent = match self.config.mode {
            EmbeddingMode::Deterministic => {
                let z = [out[0], out[1], out[2]];
                LatentContext {
                    mode: EmbeddingMode::Deterministic,
                    z,
                    mean: z,
                    std: [0.0; LATENT_DIM],
                    noise: [0.0; LATENT_DIM],
                }
            }
            EmbeddingMode::Probabilistic => {
                let mut latent = LatentContext {
                    mode: EmbeddingMode::Probabilistic,
                    z: [0.0; LATENT_DIM],
                    mean: [0.0; LATENT_DIM],
                    std: [0.0; LATENT_DIM],
                    noise: [0.0; LATENT_DIM],
                };
                for i in 0..LATENT_DIM {
                    let eps: f64 = rng.sample(StandardNormal);
                    latent.mean[i] = out[i];
                    latent.std[i] = softplus(out[LATENT_DIM + i]) + MIN_STD;
                    latent.noise[i] = eps;
                    latent.z[i] = latent.mean[i] + latent.std[i] * eps;
                }
                latent
            }
        };
        let tape = EmbedTape {
            tuple_tape,
            head_tape,
            latent: latent.clone(),
        };
        Ok((latent, tape))
    }

    pub fn embed_deterministic(&self, c: &ContextBatch) -> Result<LatentContext> {
        if self.config.mode != EmbeddingMode::Deterministic {
            return Err(Error::Config("encoder is probabilistic".into()));
        }
        let mut unused = rng::stream(0, &[]);
        Ok(self.embed(c, &mut unused)?.0)
    }

    pub fn embed_probabilistic<R: Rng + ?Sized>(&self, c: &ContextBatch, rng: &mut R) -> Result<LatentContext> {
        if self.config.mode != EmbeddingMode::Probabilistic {
            return Err(Error::Config("encoder is deterministic".into()));
        }
        Ok(self.embed(c, rng)?.0)
    }

    /// Backpropagates `∂L/∂z` plus `penalty_weight` times the configured
    /// latent regularizer into `grads`.
    pub fn backward_into(
        &self,
        tape: &EmbedTape,
        latent_grad: &[f64],
        penalty_weight: f64,
        grads: &mut EncoderGrads,
    ) -> Result<()> {
        if latent_grad.len() != LATENT_DIM {
            return Err(Error::Dimension {
                context: "latent gradient",
                expected: LATENT_DIM,
                got: latent_grad.len(),
            });
        }
        let lat = &tape.latent;
        let use_kl = self.config.regularizer == LatentRegularizer::Kl && lat.mode == EmbeddingMode::Probabilistic;
        let mut dz = [0.0; LATENT_DIM];
        for i in 0..LATENT_DIM {
            dz[i] = latent_grad[i];
            if !use_kl {
                // d|z|/dz, with 0 at the kink.
                dz[i] += penalty_weight * if lat.z[i] > 0.0 { 1.0 } else if lat.z[i] < 0.0 { -1.0 } else { 0.0 };
            }
        }
        let head_out = tape.head_tape.output();
        let d_head = match lat.mode {
            EmbeddingMode::Deterministic => Array2::from_shape_vec((1, LATENT_DIM), dz.to_vec()).expect("shape"),
            EmbeddingMode::Probabilistic => {
                let mut d = Array2::zeros((1, 2 * LATENT_DIM));
                for i in 0..LATENT_DIM {
                    let mut d_mean = dz[i];
                    let mut d_std = dz[i] * lat.noise[i];
                    if use_kl {
                        d_mean += penalty_weight * lat.mean[i];
                        d_std += penalty_weight * (lat.std[i] - 1.0 / lat.std[i]);
                    }
                    d[[0, i]] = d_mean;
                    d[[0, LATENT_DIM + i]] = d_std * sigmoid(head_out[[0, LATENT_DIM + i]]);
                }
                d
            }
        };
        let d_pooled = self.head.backward_into(&tape.head_tape, &d_head, &mut grads.head)?;
        let m = tape.tuple_tape.output().nrows();
        let d_features = Array2::from_shape_fn((m, d_pooled.ncols()), |(_, j)| d_pooled[[0, j]] / m as f64);
        self.tuple_net.backward_into(&tape.tuple_tape, &d_features, &mut grads.tuple)?;
        Ok(())
    }

    pub fn apply(&mut self, grads: &EncoderGrads, cfg: &OptimizerConfig) {
        self.tuple_net.accumulate(&grads.tuple, 1.0);
        self.tuple_net.optimizer_step(cfg);
        self.head.accumulate(&grads.head, 1.0);
        self.head.optimizer_step(cfg);
    }

    pub fn checksum(&self) -> u64 {
        self.tuple_net.checksum() ^ self.head.checksum().rotate_left(1)
    }
}

/// Regularizer value matching [`Encoder::backward_into`].
pub fn regularizer_value(lat: &LatentContext, reg: LatentRegularizer) -> f64 {
    match (reg, lat.mode) {
        (LatentRegularizer::Kl, EmbeddingMode::Probabilistic) => (0..LATENT_DIM)
            .map(|i| 0.5 * (lat.mean[i].powi(2) + lat.std[i].powi(2) - 1.0) - lat.std[i].ln())
            .sum(),
        _ => latent_penalty(&[lat.z]),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaHyperparams {
    /// Encoder learning rate.
    pub alpha1: f64,
    /// Critic learning rate.
    pub alpha2: f64,
    /// Actor learning rate.
    pub alpha3: f64,
    /// Weight of the latent penalty.
    pub beta_latent: f64,
    pub context_size: usize,
    pub recency_window: usize,
    pub batch_size: usize,
    pub train_episodes: usize,
    pub train_steps_per_episode: usize,
    pub buffer_capacity: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
}

impl Default for MetaHyperparams {
    fn default() -> Self {
        Self {
            alpha1: 1e-3,
            alpha2: 1e-3,
            alpha3: 1e-3,
            beta_latent: 1e-3,
            context_size: 64,
            recency_window: 200,
            batch_size: 128,
            train_episodes: 100,
            train_steps_per_episode: 100,
            buffer_capacity: 100_000,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
        }
    }
}

impl MetaHyperparams {
    pub fn validate(&self) -> Result<()> {
        let rates = [self.alpha1, self.alpha2, self.alpha3];
        if rates.iter().any(|r| !(r.is_finite() && *r > 0.0)) || !(self.beta_latent >= 0.0) {
            return Err(Error::Config("learning rates must be positive and the latent weight non-negative".into()));
        }
        if self.context_size == 0 || self.recency_window == 0 || self.batch_size == 0 || self.buffer_capacity == 0 {
            return Err(Error::Config("context size, recency window, batch size and capacity must be positive".into()));
        }
        self.optimizer(self.alpha1).validate()
    }

    fn optimizer(&self, learning_rate: f64) -> OptimizerConfig {
        OptimizerConfig {
            learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            epsilon: self.adam_epsilon,
        }
    }

    /// Encoder, critic and actor optimizers.
    pub fn optimizers(&self) -> (OptimizerConfig, OptimizerConfig, OptimizerConfig) {
        (self.optimizer(self.alpha1), self.optimizer(self.alpha2), self.optimizer(self.alpha3))
    }
}

/// Episode shape and plant noise shared by every task of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub n_setpoints: usize,
    pub steps_per_setpoint: usize,
    pub setpoint_low: f64,
    pub setpoint_high: f64,
    pub noise_std: f64,
    pub initial_output: f64,
    pub dt: f64,
    pub integral_limit: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            n_setpoints: 10,
            steps_per_setpoint: 20,
            setpoint_low: 0.1,
            setpoint_high: 1.0,
            noise_std: plant::DEFAULT_NOISE_STD,
            initial_output: 0.0,
            dt: plant::SAMPLE_TIME,
            integral_limit: 5.0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_setpoints == 0 || self.steps_per_setpoint == 0 {
            return Err(Error::Config("episodes need at least one setpoint and one step".into()));
        }
        if !(self.setpoint_low < self.setpoint_high) || !self.setpoint_low.is_finite() || !self.setpoint_high.is_finite() {
            return Err(Error::Config("setpoint range must be finite with low < high".into()));
        }
        if !(self.noise_std >= 0.0) || !(self.dt > 0.0) || !(self.integral_limit > 0.0) || !self.initial_output.is_finite() {
            return Err(Error::Config("noise std must be non-negative; dt and integral limit positive".into()));
        }
        Ok(())
    }

    pub fn episode_steps(&self) -> usize {
        self.n_setpoints * self.steps_per_setpoint
    }

    pub fn schedule<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<SetpointSchedule> {
        env::setpoint_schedule(
            rng,
            self.n_setpoints,
            (self.setpoint_low, self.setpoint_high),
            self.steps_per_setpoint,
        )
    }
}

/// Actor-critic plus optional encoder. Without an encoder `z ≡ 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaController {
    pub agent: Agent,
    pub encoder: Option<Encoder>,
    pub state_variant: StateVariant,
}

impl MetaController {
    pub fn new<R: Rng + ?Sized>(
        state_variant: StateVariant,
        mut agent_config: AgentConfig,
        encoder: Option<EncoderConfig>,
        rng: &mut R,
    ) -> Result<Self> {
        agent_config.state_dim = state_variant.dim();
        agent_config.latent_dim = LATENT_DIM;
        let agent = Agent::new(agent_config, rng)?;
        let encoder = encoder
            .map(|cfg| Encoder::new(cfg, context_tuple_dim(state_variant.dim()), rng))
            .transpose()?;
        Ok(Self {
            agent,
            encoder,
            state_variant,
        })
    }

    pub fn uses_embedding(&self) -> bool {
        self.encoder.is_some()
    }

    fn latent_from<R: Rng + ?Sized>(&self, c: &ContextBatch, rng: &mut R) -> Result<[f64; LATENT_DIM]> {
        match &self.encoder {
            Some(enc) => Ok(enc.embed(c, rng)?.0.z),
            None => Ok([0.0; LATENT_DIM]),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub t_seconds: f64,
    pub setpoint: f64,
    pub output: f64,
    pub action: f64,
    pub reward: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeOutcome {
    pub transitions: Vec<Transition>,
    pub cum_reward: f64,
    pub mean_abs_error: f64,
    pub mean_abs_action_change: f64,
    pub trajectory: Vec<TrajectoryPoint>,
    /// Latent in force at the end of the episode.
    pub latent: [f64; LATENT_DIM],
}

/// Runs one episode of `task` under `schedule`.
///
/// `z` is computed once from recent context in `buffer`. When the buffer is
/// empty the first `z` comes from the zero placeholder tuple and is then
/// recomputed after every step from the episode's own transitions until
/// `context_size` of them exist, after which it is held.
#[allow(clippy::too_many_arguments)]
pub fn rollout<R: Rng + ?Sized>(
    ctrl: &MetaController,
    task: &Task,
    env_cfg: &EnvConfig,
    schedule: SetpointSchedule,
    buffer: &ReplayBuffer,
    hp: &MetaHyperparams,
    explore: bool,
    rng: &mut R,
) -> Result<EpisodeOutcome> {
    let variant = ctrl.state_variant;
    let tuple_dim = context_tuple_dim(variant.dim());
    let cold_start = buffer.is_empty() && ctrl.uses_embedding();
    let mut z = if !ctrl.uses_embedding() {
        [0.0; LATENT_DIM]
    } else if cold_start {
        ctrl.latent_from(&ContextBatch::placeholder(tuple_dim), rng)?
    } else {
        let c = sample_context_recent(buffer, hp.context_size, hp.recency_window, rng)?;
        ctrl.latent_from(&c, rng)?
    };

    let mut plant = discretize(task.plant, env_cfg.dt, env_cfg.noise_std)?;
    plant.reset(env_cfg.initial_output);
    let mut ep = EpisodeState::start(schedule, env_cfg.initial_output, env_cfg.dt).with_integral_limit(env_cfg.integral_limit);
    let steps = ep.schedule.total_steps();
    let mut transitions: Vec<Transition> = Vec::with_capacity(steps);
    let mut trajectory = Vec::with_capacity(steps);
    let (mut cum, mut abs_err, mut abs_da) = (0.0, 0.0, 0.0);
    let bound = ctrl.agent.config.action_bound;
    while !ep.is_done() {
        let state = env::build_state(&ep, variant);
        let action = ctrl.agent.select_action(&state, &z, explore, rng)?;
        let prev = ep.prev_action();
        let (t, info) = env::env_step(task, variant, &mut plant, &mut ep, action, bound, rng)?;
        cum += t.reward;
        abs_err += info.error.abs();
        if ep.step_index > 1 {
            abs_da += (t.action - prev).abs();
        }
        trajectory.push(TrajectoryPoint {
            t_seconds: ep.step_index as f64 * env_cfg.dt,
            setpoint: info.setpoint,
            output: info.output,
            action: t.action,
            reward: t.reward,
        });
        transitions.push(t);
        if cold_start && transitions.len() <= hp.context_size && !ep.is_done() {
            let refs: Vec<&Transition> = transitions.iter().collect();
            z = ctrl.latent_from(&ContextBatch::from_transitions(&refs)?, rng)?;
        }
    }
    let n = steps.max(1) as f64;
    Ok(EpisodeOutcome {
        transitions,
        cum_reward: cum,
        mean_abs_error: abs_err / n,
        mean_abs_action_change: abs_da / (n - 1.0).max(1.0),
        trajectory,
        latent: z,
    })
}

/// Gradients from one task's share of a training step.
struct TaskUpdate {
    critic: Gradients,
    actor: Gradients,
    encoder: Option<EncoderGrads>,
    critic_loss: f64,
    latent: [f64; LATENT_DIM],
}

fn task_update<R: Rng + ?Sized>(
    ctrl: &MetaController,
    buffer: &ReplayBuffer,
    hp: &MetaHyperparams,
    train_encoder: bool,
    rng: &mut R,
) -> Result<TaskUpdate> {
    let (z, tape) = match &ctrl.encoder {
        Some(enc) => {
            let c = sample_context_recent(buffer, hp.context_size, hp.recency_window, rng)?;
            let (lat, tape) = enc.embed(&c, rng)?;
            (lat.z, Some(tape))
        }
        None => ([0.0; LATENT_DIM], None),
    };
    let batch = buffer.sample_uniform(hp.batch_size, rng)?;
    let critic = ctrl.agent.critic_loss(&batch, &z)?;
    let actor = ctrl.agent.actor_loss(&batch, &z)?;
    let encoder = match (&ctrl.encoder, tape) {
        (Some(enc), Some(tape)) if train_encoder => {
            let mut g = enc.zero_grads();
            enc.backward_into(&tape, &critic.latent_grad, hp.beta_latent, &mut g)?;
            Some(g)
        }
        _ => None,
    };
    Ok(TaskUpdate {
        critic: critic.grads,
        actor: actor.grads,
        encoder,
        critic_loss: critic.loss,
        latent: z,
    })
}

/// One optimizer step over all `buffers`; the task shares are computed in
/// parallel and summed in task order. Returns the mean critic loss.
fn train_step(
    ctrl: &mut MetaController,
    buffers: &[ReplayBuffer],
    hp: &MetaHyperparams,
    train_encoder: bool,
    seeds: &[u64],
) -> Result<(f64, Vec<[f64; LATENT_DIM]>)> {
    let snapshot: &MetaController = ctrl;
    let updates = exec::par_map_range(buffers.len(), |i| {
        let mut r = rng::stream(seeds[i], &[]);
        task_update(snapshot, &buffers[i], hp, train_encoder, &mut r)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let (a1, a2, a3) = hp.optimizers();
    let mut critic = ctrl.agent.critic.zero_gradients();
    let mut actor = ctrl.agent.actor.zero_gradients();
    let mut encoder = ctrl.encoder.as_ref().map(Encoder::zero_grads);
    let mut loss = 0.0;
    for u in &updates {
        critic.add_scaled(&u.critic, 1.0);
        actor.add_scaled(&u.actor, 1.0);
        if let (Some(total), Some(g)) = (encoder.as_mut(), u.encoder.as_ref()) {
            total.add(g);
        }
        loss += u.critic_loss;
    }
    if train_encoder {
        if let (Some(enc), Some(g)) = (ctrl.encoder.as_mut(), encoder.as_ref()) {
            enc.apply(g, &a1);
        }
    }
    ctrl.agent.apply_critic(&critic, &a2);
    ctrl.agent.apply_actor(&actor, &a3);
    let tau = ctrl.agent.config.tau;
    ctrl.agent.soft_update_targets(tau);
    Ok((loss / updates.len().max(1) as f64, updates.iter().map(|u| u.latent).collect()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub task_id: u32,
    /// Return of the data-gathering (exploring) rollout.
    pub cum_reward: f64,
    pub mean_abs_error: f64,
    pub mean_abs_action_change: f64,
    /// Same quantities for a greedy rollout run after the episode's updates.
    pub eval_cum_reward: f64,
    pub eval_mean_abs_error: f64,
    pub eval_mean_abs_action_change: f64,
    pub critic_loss: f64,
    pub mean_abs_latent: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpisodeRecord>,
}

impl TrainLog {
    pub fn for_task(&self, task_id: u32) -> impl DoubleEndedIterator<Item = &EpisodeRecord> {
        self.records.iter().filter(move |r| r.task_id == task_id)
    }

    pub fn episode_count(&self) -> usize {
        self.records.iter().map(|r| r.episode + 1).max().unwrap_or(0)
    }
}

/// Data gathered per task during meta-training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutput {
    pub buffers: Vec<ReplayBuffer>,
    pub log: TrainLog,
}

fn new_buffers(tasks: &[Task], capacity: usize) -> Vec<ReplayBuffer> {
    tasks.iter().map(|t| ReplayBuffer::new(t.id, capacity)).collect()
}

/// Meta-training over `tasks`.
///
/// Every episode first rolls out each task once (in parallel) under a `z`
/// from that task's recent context, then runs `train_steps_per_episode`
/// updates in which each task contributes critic, actor and encoder gradients
/// computed from a fresh context batch and a uniform transition batch.
pub fn meta_train(
    ctrl: &mut MetaController,
    tasks: &[Task],
    hp: &MetaHyperparams,
    env_cfg: &EnvConfig,
    seed: u64,
) -> Result<TrainOutput> {
    let mut buffers = new_buffers(tasks, hp.buffer_capacity);
    let log = meta_train_with(ctrl, tasks, &mut buffers, hp, env_cfg, seed, 0)?;
    Ok(TrainOutput { buffers, log })
}

/// Continues meta-training with existing buffers, numbering episodes from `first_episode`.
pub fn meta_train_with(
    ctrl: &mut MetaController,
    tasks: &[Task],
    buffers: &mut [ReplayBuffer],
    hp: &MetaHyperparams,
    env_cfg: &EnvConfig,
    seed: u64,
    first_episode: usize,
) -> Result<TrainLog> {
    if tasks.is_empty() {
        return Err(Error::Empty("task set"));
    }
    hp.validate()?;
    env_cfg.validate()?;
    if buffers.len() != tasks.len() {
        return Err(Error::Dimension {
            context: "buffers per task",
            expected: tasks.len(),
            got: buffers.len(),
        });
    }
    let mut log = TrainLog::default();
    for episode in first_episode..first_episode + hp.train_episodes {
        let e = episode as u64;
        let snapshot: &MetaController = ctrl;
        let buffers_ro: &[ReplayBuffer] = buffers;
        let outcomes = exec::par_map_range(tasks.len(), |i| {
            let mut r = rng::stream(seed, &[tag::ROLLOUT, e, i as u64]);
            let schedule = env_cfg.schedule(&mut r)?;
            rollout(snapshot, &tasks[i], env_cfg, schedule, &buffers_ro[i], hp, true, &mut r)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        for (buf, out) in buffers.iter_mut().zip(&outcomes) {
            buf.extend(out.transitions.iter().cloned());
        }

        let mut loss = 0.0;
        let mut abs_latent = vec![0.0; tasks.len()];
        for step in 0..hp.train_steps_per_episode {
            let seeds: Vec<u64> = (0..tasks.len())
                .map(|i| rng::derive_seed(seed, &[tag::TRAIN, e, step as u64, i as u64]))
                .collect();
            let (l, latents) = train_step(ctrl, buffers, hp, true, &seeds)?;
            loss += l;
            for (acc, z) in abs_latent.iter_mut().zip(&latents) {
                *acc += latent_penalty(&[*z]);
            }
        }
        let steps = hp.train_steps_per_episode.max(1) as f64;

        let snapshot: &MetaController = ctrl;
        let buffers_ro: &[ReplayBuffer] = buffers;
        let evals = exec::par_map_range(tasks.len(), |i| {
            let mut r = rng::stream(seed, &[tag::EVAL, e, i as u64]);
            let schedule = env_cfg.schedule(&mut r)?;
            rollout(snapshot, &tasks[i], env_cfg, schedule, &buffers_ro[i], hp, false, &mut r)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

        for (i, (out, ev)) in outcomes.iter().zip(&evals).enumerate() {
            log.records.push(EpisodeRecord {
                episode,
                task_id: tasks[i].id,
                cum_reward: out.cum_reward,
                mean_abs_error: out.mean_abs_error,
                mean_abs_action_change: out.mean_abs_action_change,
                eval_cum_reward: ev.cum_reward,
                eval_mean_abs_error: ev.mean_abs_error,
                eval_mean_abs_action_change: ev.mean_abs_action_change,
                critic_loss: loss / steps,
                mean_abs_latent: abs_latent[i] / steps,
            });
        }
    }
    Ok(log)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub episodes: usize,
    pub train_steps_per_episode: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptOutput {
    pub log: TrainLog,
    pub buffer: ReplayBuffer,
    /// Greedy rollout before any task-specific data or update.
    pub initial_eval: EpisodeOutcome,
    /// Greedy rollout after the last episode.
    pub final_eval: EpisodeOutcome,
}

/// Adaptation to a held-out task: rollouts under context-conditioned `z`,
/// then critic and actor updates only. The encoder is never modified.
///
/// Every episode runs on `schedule` so that controllers compared under the
/// same seed see identical setpoints.
pub fn adapt(
    ctrl: &mut MetaController,
    task: &Task,
    hp: &MetaHyperparams,
    adapt_cfg: &AdaptConfig,
    env_cfg: &EnvConfig,
    schedule: &SetpointSchedule,
    seed: u64,
) -> Result<AdaptOutput> {
    hp.validate()?;
    env_cfg.validate()?;
    let mut buffer = ReplayBuffer::new(task.id, hp.buffer_capacity);
    let mut r = rng::stream(seed, &[tag::ADAPT, tag::EVAL]);
    let initial_eval = rollout(ctrl, task, env_cfg, schedule.clone(), &buffer, hp, false, &mut r)?;
    let mut log = TrainLog::default();
    for episode in 0..adapt_cfg.episodes {
        let e = episode as u64;
        let mut r = rng::stream(seed, &[tag::ADAPT, tag::ROLLOUT, e]);
        let out = rollout(ctrl, task, env_cfg, schedule.clone(), &buffer, hp, true, &mut r)?;
        buffer.extend(out.transitions.iter().cloned());
        let mut loss = 0.0;
        let mut abs_latent = 0.0;
        for step in 0..adapt_cfg.train_steps_per_episode {
            let seeds = [rng::derive_seed(seed, &[tag::ADAPT, tag::TRAIN, e, step as u64])];
            let (l, latents) = train_step(ctrl, std::slice::from_ref(&buffer), hp, false, &seeds)?;
            loss += l;
            abs_latent += latent_penalty(&latents);
        }
        let steps = adapt_cfg.train_steps_per_episode.max(1) as f64;
        let mut r = rng::stream(seed, &[tag::ADAPT, tag::EVAL, e]);
        let ev = rollout(ctrl, task, env_cfg, schedule.clone(), &buffer, hp, false, &mut r)?;
        log.records.push(EpisodeRecord {
            episode,
            task_id: task.id,
            cum_reward: out.cum_reward,
            mean_abs_error: out.mean_abs_error,
            mean_abs_action_change: out.mean_abs_action_change,
            eval_cum_reward: ev.cum_reward,
            eval_mean_abs_error: ev.mean_abs_error,
            eval_mean_abs_action_change: ev.mean_abs_action_change,
            critic_loss: loss / steps,
            mean_abs_latent: abs_latent / steps,
        });
    }
    let mut r = rng::stream(seed, &[tag::ADAPT, tag::EVAL, u64::MAX]);
    let final_eval = rollout(ctrl, task, env_cfg, schedule.clone(), &buffer, hp, false, &mut r)?;
    Ok(AdaptOutput {
        log,
        buffer,
        initial_eval,
        final_eval,
    })
}

/// Fills a buffer for `task` with `episodes` rollouts of the current policy, without updates.
pub fn gather_context(
    ctrl: &MetaController,
    task: &Task,
    hp: &MetaHyperparams,
    env_cfg: &EnvConfig,
    episodes: usize,
    explore: bool,
    seed: u64,
) -> Result<ReplayBuffer> {
    let mut buffer = ReplayBuffer::new(task.id, hp.buffer_capacity);
    for e in 0..episodes {
        let mut r = rng::stream(seed, &[tag::EXPORT, tag::ROLLOUT, task.id as u64, e as u64]);
        let schedule = env_cfg.schedule(&mut r)?;
        let out = rollout(ctrl, task, env_cfg, schedule, &buffer, hp, explore, &mut r)?;
        buffer.extend(out.transitions);
    }
    Ok(buffer)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub task_id: u32,
    pub z1: f64,
    pub z2: f64,
    pub z3: f64,
}

impl EmbeddingRow {
    pub fn z(&self) -> [f64; LATENT_DIM] {
        [self.z1, self.z2, self.z3]
    }
}

/// `n_draws` latents per buffer, each from an independent recent-context sample.
pub fn export_embeddings(
    encoder: &Encoder,
    buffers: &[&ReplayBuffer],
    hp: &MetaHyperparams,
    n_draws: usize,
    seed: u64,
) -> Result<Vec<EmbeddingRow>> {
    let mut rows = Vec::with_capacity(buffers.len() * n_draws);
    for buffer in buffers {
        if buffer.is_empty() {
            return Err(Error::Empty("task buffer"));
        }
        for d in 0..n_draws {
            let mut r = rng::stream(seed, &[tag::EXPORT, buffer.task_id() as u64, d as u64]);
            let c = sample_context_recent(buffer, hp.context_size, hp.recency_window, &mut r)?;
            let z = encoder.embed(&c, &mut r)?.0.z;
            rows.push(EmbeddingRow {
                task_id: buffer.task_id(),
                z1: z[0],
                z2: z[1],
                z3: z[2],
            });
        }
    }
    Ok(rows)
}
