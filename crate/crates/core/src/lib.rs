//! Meta-reinforcement-learning controllers for simulated SISO processes.
//!
//! A DDPG actor-critic is conditioned on a low-dimensional latent context `z`
//! produced by an embedding network from recent experience. Training runs over a
//! distribution of plants and reward objectives; the trained controller is then
//! evaluated and fine-tuned on held-out tasks with the embedding network frozen.
//!
//! Module map:
//! - [`plant`]: exact zero-order-hold simulation of `K/(τs+1)^n` plants
//! - [`env`]: tasks, state assembly, rewards, setpoint schedules
//! - [`nn`]: dense networks with reverse-mode gradients and Adam
//! - [`ddpg`]: replay buffers and the latent-conditioned actor-critic
//! - [`meta`]: context samplers, embedding networks, meta-training and adaptation
//! - [`harness`]: experiment presets, metrics, CSV output and checkpoints

pub mod ddpg;
pub mod env;
pub mod error;
pub mod exec;
pub mod harness;
pub mod meta;
pub mod nn;
pub mod plant;
pub mod rng;

pub use error::{Error, Result};
