//! Off-policy actor-critic conditioned on a latent context.
//!
//! The actor sees `s ⊕ z` and emits `u_max·tanh(·)`; the critic sees
//! `s ⊕ z ⊕ a/u_max`. Target copies of both track the online networks by
//! soft blending and supply the one-step bootstrap target.

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::nn::{Activation, Gradients, Network, OptimizerConfig};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: f64,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
    pub task_id: u32,
}

/// Fixed-capacity FIFO ring of transitions for one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    task_id: u32,
    capacity: usize,
    items: Vec<Transition>,
    /// Slot the next insertion overwrites once the ring is full.
    cursor: usize,
    inserted: u64,
}

impl ReplayBuffer {
    pub fn new(task_id: u32, capacity: usize) -> Self {
        assert!(capacity > 0, "replay buffer capacity must be positive");
        Self {
            task_id,
            capacity,
            items: Vec::new(),
            cursor: 0,
            inserted: 0,
        }
    }

    pub fn task_id(&self) -> u32 {
        self.task_id
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn total_inserted(&self) -> u64 {
        self.inserted
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
        self.inserted += 1;
    }

    pub fn extend(&mut self, ts: impl IntoIterator<Item = Transition>) {
        ts.into_iter().for_each(|t| self.push(t));
    }

    /// The `i`-th most recent transition (`0` is the newest).
    pub fn nth_recent(&self, i: usize) -> Option<&Transition> {
        if i >= self.items.len() {
            return None;
        }
        let newest = (self.cursor + self.capacity - 1) % self.capacity;
        let idx = (newest + self.capacity - i) % self.capacity;
        self.items.get(idx)
    }

    /// Up to `k` most recent transitions, newest first.
    pub fn recent(&self, k: usize) -> Vec<&Transition> {
        (0..k.min(self.len())).filter_map(|i| self.nth_recent(i)).collect()
    }

    /// Oldest to newest.
    pub fn iter_in_order(&self) -> impl Iterator<Item = &Transition> {
        (0..self.len()).rev().filter_map(move |i| self.nth_recent(i))
    }

    /// `n` draws, uniform with replacement.
    pub fn sample_uniform<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<&Transition>> {
        if self.is_empty() {
            return Err(Error::Empty("replay buffer"));
        }
        Ok((0..n).map(|_| &self.items[rng.random_range(0..self.items.len())]).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub state_dim: usize,
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub gamma: f64,
    /// Soft target blend per update.
    pub tau: f64,
    pub action_bound: f64,
    /// Exploration noise std in action units.
    pub explore_std: f64,
    pub final_layer_scale: f64,
}

impl AgentConfig {
    pub fn new(state_dim: usize, latent_dim: usize) -> Self {
        Self {
            state_dim,
            latent_dim,
            hidden: vec![64, 64],
            gamma: 0.99,
            tau: 0.005,
            action_bound: 2.0,
            explore_std: 0.2,
            final_layer_scale: 1e-3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("discount must lie in [0, 1), got {}", self.gamma)));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!("target blend must lie in (0, 1], got {}", self.tau)));
        }
        if !(self.action_bound > 0.0) || self.explore_std < 0.0 {
            return Err(Error::Config("action bound must be positive and exploration std non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub config: AgentConfig,
    pub actor: Network,
    pub critic: Network,
    pub actor_target: Network,
    pub critic_target: Network,
}

#[derive(Clone, Debug)]
pub struct CriticLoss {
    pub loss: f64,
    pub grads: Gradients,
    /// `∂L/∂z`, summed over the batch.
    pub latent_grad: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ActorLoss {
    pub objective: f64,
    /// Gradient of the objective (ascent direction).
    pub grads: Gradients,
}

fn hidden_mlp<R: Rng + ?Sized>(
    input: usize,
    hidden: &[usize],
    output_activation: Activation,
    final_scale: f64,
    rng: &mut R,
) -> Result<Network> {
    let mut sizes = vec![input];
    sizes.extend_from_slice(hidden);
    sizes.push(1);
    let mut acts = vec![Activation::Relu; hidden.len()];
    acts.push(output_activation);
    let mut net = Network::mlp(&sizes, &acts, rng)?;
    net.scale_final_layer(final_scale, rng);
    Ok(net)
}

impl Agent {
    pub fn new<R: Rng + ?Sized>(config: AgentConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let obs = config.state_dim + config.latent_dim;
        let actor = hidden_mlp(obs, &config.hidden, Activation::Tanh, config.final_layer_scale, rng)?;
        let critic = hidden_mlp(obs + 1, &config.hidden, Activation::Identity, config.final_layer_scale, rng)?;
        Ok(Self {
            actor_target: actor.clone(),
            critic_target: critic.clone(),
            actor,
            critic,
            config,
        })
    }

    pub fn from_networks(config: AgentConfig, actor: Network, critic: Network) -> Result<Self> {
        config.validate()?;
        let obs = config.state_dim + config.latent_dim;
        if actor.input_dim() != obs || critic.input_dim() != obs + 1 || actor.output_dim() != 1 || critic.output_dim() != 1 {
            return Err(Error::Dimension {
                context: "actor/critic shapes",
                expected: obs,
                got: actor.input_dim(),
            });
        }
        Ok(Self {
            actor_target: actor.clone(),
            critic_target: critic.clone(),
            actor,
            critic,
            config,
        })
    }

    fn check_dims(&self, state: &[f64], z: &[f64]) -> Result<()> {
        if state.len() != self.config.state_dim {
            return Err(Error::Dimension {
                context: "state",
                expected: self.config.state_dim,
                got: state.len(),
            });
        }
        if z.len() != self.config.latent_dim {
            return Err(Error::Dimension {
                context: "latent",
                expected: self.config.latent_dim,
                got: z.len(),
            });
        }
        Ok(())
    }

    /// Deterministic policy output in action units.
    pub fn policy(&self, state: &[f64], z: &[f64]) -> Result<f64> {
        self.check_dims(state, z)?;
        let mut x = Vec::with_capacity(state.len() + z.len());
        x.extend_from_slice(state);
        x.extend_from_slice(z);
        Ok(self.actor.predict_one(&x)?[0] * self.config.action_bound)
    }

    /// Policy action plus optional Gaussian exploration, clamped to the bound.
    pub fn select_action<R: Rng + ?Sized>(&self, state: &[f64], z: &[f64], explore: bool, rng: &mut R) -> Result<f64> {
        let mut a = self.policy(state, z)?;
        if explore {
            let eps: f64 = rng.sample(StandardNormal);
            a += self.config.explore_std * eps;
        }
        let b = self.config.action_bound;
        Ok(a.clamp(-b, b))
    }

    /// `[s ⊕ z]` rows, from current or next states.
    fn observation_rows(&self, batch: &[&Transition], z: &[f64], next: bool, extra: usize) -> Array2<f64> {
        let cols = self.config.state_dim + self.config.latent_dim + extra;
        let mut x = Array2::zeros((batch.len(), cols));
        for (mut row, t) in x.axis_iter_mut(Axis(0)).zip(batch) {
            let s = if next { &t.next_state } else { &t.state };
            for (dst, src) in row.iter_mut().zip(s.iter().chain(z)) {
                *dst = *src;
            }
        }
        x
    }

    fn check_batch(&self, batch: &[&Transition], z: &[f64]) -> Result<()> {
        let first = batch.first().ok_or(Error::Empty("transition batch"))?;
        self.check_dims(&first.state, z)?;
        if let Some(bad) = batch
            .iter()
            .find(|t| t.state.len() != self.config.state_dim || t.next_state.len() != self.config.state_dim)
        {
            return Err(Error::Dimension {
                context: "batch state",
                expected: self.config.state_dim,
                got: bad.state.len().max(bad.next_state.len()),
            });
        }
        Ok(())
    }

    /// Bootstrap targets `r + γ·Q'(s' ⊕ z, π'(s' ⊕ z))`, cut at terminal transitions.
    pub fn critic_targets(&self, batch: &[&Transition], z: &[f64]) -> Result<Vec<f64>> {
        self.check_batch(batch, z)?;
        let obs = self.config.state_dim + self.config.latent_dim;
        let mut x = self.observation_rows(batch, z, true, 1);
        let actor_in = x.slice(ndarray::s![.., ..obs]);
        let next_actions = self.actor_target.predict(actor_in)?;
        x.column_mut(obs).assign(&next_actions.column(0));
        let q_next = self.critic_target.predict(x.view())?;
        Ok(batch
            .iter()
            .zip(q_next.column(0))
            .map(|(t, &q)| if t.done { t.reward } else { t.reward + self.config.gamma * q })
            .collect())
    }

    /// Single-transition form of [`Agent::critic_targets`].
    pub fn critic_target(&self, reward: f64, next_state: &[f64], z: &[f64], done: bool) -> Result<f64> {
        let t = Transition {
            state: next_state.to_vec(),
            action: 0.0,
            reward,
            next_state: next_state.to_vec(),
            done,
            task_id: 0,
        };
        Ok(self.critic_targets(&[&t], z)?[0])
    }

    /// Mean squared TD error with gradients for the critic and for `z`.
    pub fn critic_loss(&self, batch: &[&Transition], z: &[f64]) -> Result<CriticLoss> {
        let targets = self.critic_targets(batch, z)?;
        let obs = self.config.state_dim + self.config.latent_dim;
        let mut x = self.observation_rows(batch, z, false, 1);
        for (row, t) in batch.iter().enumerate() {
            x[[row, obs]] = t.action / self.config.action_bound;
        }
        let tape = self.critic.forward(x.view())?;
        let n = batch.len() as f64;
        let q = tape.output().column(0);
        let loss = q.iter().zip(&targets).map(|(q, y)| (y - q).powi(2)).sum::<f64>() / n;
        let dq = Array2::from_shape_fn((batch.len(), 1), |(i, _)| 2.0 * (q[i] - targets[i]) / n);
        let mut grads = self.critic.zero_gradients();
        let dx = self.critic.backward_into(&tape, &dq, &mut grads)?;
        let latent_grad = (0..self.config.latent_dim)
            .map(|j| dx.column(self.config.state_dim + j).sum())
            .collect();
        Ok(CriticLoss {
            loss,
            grads,
            latent_grad,
        })
    }

    /// `(1/N) Σ Q(s ⊕ z, π(s ⊕ z))` with its gradient for the actor only.
    pub fn actor_loss(&self, batch: &[&Transition], z: &[f64]) -> Result<ActorLoss> {
        self.check_batch(batch, z)?;
        let obs = self.config.state_dim + self.config.latent_dim;
        let actor_in = self.observation_rows(batch, z, false, 0);
        let actor_tape = self.actor.forward(actor_in.view())?;
        let mut critic_in = self.observation_rows(batch, z, false, 1);
        critic_in.column_mut(obs).assign(&actor_tape.output().column(0));
        let critic_tape = self.critic.forward(critic_in.view())?;
        let n = batch.len() as f64;
        let objective = critic_tape.output().sum() / n;
        let dq = Array2::from_elem((batch.len(), 1), 1.0 / n);
        let dx = self.critic.input_gradient(&critic_tape, &dq)?;
        let da = dx.slice(ndarray::s![.., obs..obs + 1]).to_owned();
        let mut grads = self.actor.zero_gradients();
        self.actor.backward_into(&actor_tape, &da, &mut grads)?;
        Ok(ActorLoss { objective, grads })
    }

    /// Critic descent on accumulated `grads`.
    pub fn apply_critic(&mut self, grads: &Gradients, cfg: &OptimizerConfig) {
        self.critic.accumulate(grads, 1.0);
        self.critic.optimizer_step(cfg);
    }

    /// Actor ascent along objective gradients `grads`.
    pub fn apply_actor(&mut self, grads: &Gradients, cfg: &OptimizerConfig) {
        self.actor.accumulate(grads, -1.0);
        self.actor.optimizer_step(cfg);
    }

    pub fn soft_update_targets(&mut self, blend: f64) {
        self.actor_target.soft_update_from(&self.actor, blend);
        self.critic_target.soft_update_from(&self.critic, blend);
    }
}
