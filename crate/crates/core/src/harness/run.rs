//! Experiment orchestration: one job per seed, merged in seed order.

use std::path::{Path, PathBuf};

use super::checkpoint::{Checkpoint, Stage};
use super::config::{ControllerVariant, ExperimentConfig};
use super::metrics::{compute_metrics, MetricsRow};
use super::records::*;
use crate::ddpg::ReplayBuffer;
use crate::env::{make_task_set_with, test_tasks, train_tasks, SetpointSchedule, Task};
use crate::meta::{
    adapt, export_embeddings, gather_context, meta_train, rollout, EmbeddingRow, EnvConfig, EpisodeOutcome,
    MetaController, TrainLog,
};
use crate::rng::{self, tag};
use crate::{exec, Error, Result};

/// The evaluation schedule of a seed. It depends on nothing but the seed and
/// the episode shape, so every controller variant sees the same setpoints.
pub fn fixed_eval_schedule(seed: u64, env: &EnvConfig) -> Result<SetpointSchedule> {
    eval_schedule(seed, env, 0)
}

/// `k`-th evaluation schedule of a seed; `k = 0` is [`fixed_eval_schedule`].
pub fn eval_schedule(seed: u64, env: &EnvConfig, k: usize) -> Result<SetpointSchedule> {
    let tags: &[u64] = if k == 0 { &[tag::SCHEDULE] } else { &[tag::SCHEDULE, k as u64] };
    env.schedule(&mut rng::stream(seed, tags))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedOutcome {
    pub seed: u64,
    /// Primary learning curve: meta-training for generalization presets,
    /// adaptation for adaptation presets.
    pub episodes: Vec<EpisodeRow>,
    pub meta_train_episodes: Vec<EpisodeRow>,
    pub trajectory: Vec<TrajectoryRow>,
    pub embeddings: Option<Vec<EmbeddingRow>>,
    pub train_log: Option<TrainLog>,
    pub adapt_log: Option<TrainLog>,
    pub trained: Option<Checkpoint>,
    pub adapted: Option<Checkpoint>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub dir: PathBuf,
    pub config: ExperimentConfig,
    pub seeds: Vec<SeedOutcome>,
    pub metrics: Vec<MetricsRow>,
}

pub fn seed_dir(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("seed-{seed}"))
}

pub fn new_controller(cfg: &ExperimentConfig, seed: u64) -> Result<MetaController> {
    let state = cfg.state_variant();
    MetaController::new(
        state,
        cfg.agent_config(state),
        cfg.encoder_config(),
        &mut rng::stream(seed, &[tag::INIT]),
    )
}

fn episode_rows(seed: u64, log: &TrainLog) -> Vec<EpisodeRow> {
    log.records
        .iter()
        .map(|r| EpisodeRow {
            seed,
            task_id: r.task_id,
            episode: r.episode,
            cum_reward: r.cum_reward,
        })
        .collect()
}

fn trajectory_rows(seed: u64, task_id: u32, episode: usize, out: &EpisodeOutcome) -> Vec<TrajectoryRow> {
    out.trajectory
        .iter()
        .map(|p| TrajectoryRow {
            seed,
            task_id,
            episode,
            t_seconds: p.t_seconds,
            setpoint: p.setpoint,
            output: p.output,
            action: p.action,
            reward: p.reward,
        })
        .collect()
}

/// Greedy rollouts of every task on the seed's evaluation schedules, using
/// each training task's recent buffer as context; tasks without a buffer start cold.
fn evaluate(
    cfg: &ExperimentConfig,
    ctrl: &MetaController,
    tasks: &[Task],
    buffers: &[ReplayBuffer],
    seed: u64,
) -> Result<Vec<TrajectoryRow>> {
    let hp = cfg.hyperparams();
    let env = cfg.env();
    let jobs: Vec<(usize, usize)> = (0..tasks.len())
        .flat_map(|i| (0..cfg.eval_episodes).map(move |k| (i, k)))
        .collect();
    let rows = exec::par_map(&jobs, |&(i, k)| -> Result<Vec<TrajectoryRow>> {
        let task = &tasks[i];
        let empty = ReplayBuffer::new(task.id, 1);
        let buffer = buffers.iter().find(|b| b.task_id() == task.id).unwrap_or(&empty);
        let schedule = eval_schedule(seed, &env, k)?;
        let mut r = rng::stream(seed, &[tag::EVAL, u64::MAX, task.id as u64, k as u64]);
        let out = rollout(ctrl, task, &env, schedule, buffer, &hp, false, &mut r)?;
        Ok(trajectory_rows(seed, task.id, k, &out))
    });
    Ok(rows.into_iter().collect::<Result<Vec<_>>>()?.concat())
}

/// Embeddings of every task in the checkpoint's config: training tasks from
/// the stored buffers, held-out tasks from fresh greedy rollouts.
pub fn export_from_checkpoint(ckpt: &Checkpoint) -> Result<Vec<EmbeddingRow>> {
    let cfg = &ckpt.config;
    let encoder = ckpt
        .controller
        .encoder
        .as_ref()
        .ok_or_else(|| Error::Config(format!("variant {} has no embedding network", cfg.variant)))?;
    let hp = cfg.hyperparams();
    let env = cfg.env();
    let tasks = make_task_set_with(cfg.preset.experiment(), &cfg.task_set());
    let gathered = test_tasks(&tasks)
        .iter()
        .filter(|t| ckpt.buffers.iter().all(|b| b.task_id() != t.id))
        .map(|t| gather_context(&ckpt.controller, t, &hp, &env, cfg.context_episodes, false, ckpt.seed))
        .collect::<Result<Vec<_>>>()?;
    let buffers: Vec<&ReplayBuffer> = ckpt.buffers.iter().chain(&gathered).collect();
    export_embeddings(encoder, &buffers, &hp, cfg.export_draws, ckpt.seed)
}

pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedOutcome> {
    let tasks = make_task_set_with(cfg.preset.experiment(), &cfg.task_set());
    let train = train_tasks(&tasks);
    let hp = cfg.hyperparams();
    let env = cfg.env();
    let mut ctrl = new_controller(cfg, seed)?;
    let mut outcome = SeedOutcome {
        seed,
        episodes: Vec::new(),
        meta_train_episodes: Vec::new(),
        trajectory: Vec::new(),
        embeddings: None,
        train_log: None,
        adapt_log: None,
        trained: None,
        adapted: None,
    };

    if cfg.variant != ControllerVariant::Scratch {
        let out = meta_train(&mut ctrl, &train, &hp, &env, seed)?;
        let ckpt = Checkpoint::new(Stage::MetaTrained, seed, cfg, &ctrl, &out.buffers);
        if ctrl.uses_embedding() {
            outcome.embeddings = Some(export_from_checkpoint(&ckpt)?);
        }
        outcome.meta_train_episodes = episode_rows(seed, &out.log);
        if !cfg.preset.adapts() {
            outcome.episodes = outcome.meta_train_episodes.clone();
            outcome.trajectory = evaluate(cfg, &ctrl, &tasks, &out.buffers, seed)?;
        }
        outcome.train_log = Some(out.log);
        outcome.trained = Some(ckpt);
    }

    if cfg.preset.adapts() {
        let test = test_tasks(&tasks)
            .into_iter()
            .next()
            .ok_or(Error::Empty("held-out task set"))?;
        let schedule = fixed_eval_schedule(seed, &env)?;
        let out = adapt(&mut ctrl, &test, &hp, &cfg.adapt_config(), &env, &schedule, seed)?;
        outcome.episodes = episode_rows(seed, &out.log);
        outcome.trajectory = trajectory_rows(seed, test.id, 0, &out.initial_eval);
        outcome
            .trajectory
            .extend(trajectory_rows(seed, test.id, cfg.adapt_episodes, &out.final_eval));
        outcome.adapted = Some(Checkpoint::new(
            Stage::Adapted,
            seed,
            cfg,
            &ctrl,
            std::slice::from_ref(&out.buffer),
        ));
        outcome.adapt_log = Some(out.log);
    }
    Ok(outcome)
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Runs every seed of `cfg` and writes the results directory:
/// `config.toml`, `episodes.csv`, `trajectory.csv`, `metrics.csv`, and per
/// seed `seed-<n>/checkpoint.json`, `seed-<n>/adapted.json`,
/// `seed-<n>/embeddings.csv` where they apply. Adaptation presets also write
/// the meta-training curve to `meta_train_episodes.csv`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    let dir = cfg.results_dir();
    create_dir(&dir)?;
    let config_path = dir.join(CONFIG_FILE);
    std::fs::write(&config_path, cfg.to_toml_string()).map_err(|e| Error::io(&config_path, e))?;

    let seeds = exec::par_map(&cfg.seeds, |&seed| -> Result<SeedOutcome> {
        let out = run_seed(cfg, seed)?;
        let sdir = seed_dir(&dir, seed);
        create_dir(&sdir)?;
        if let Some(c) = &out.trained {
            c.save(&sdir.join("checkpoint.json"))?;
        }
        if let Some(c) = &out.adapted {
            c.save(&sdir.join("adapted.json"))?;
        }
        if let Some(rows) = &out.embeddings {
            write_embeddings(&sdir.join(EMBEDDINGS_FILE), rows)?;
        }
        Ok(out)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let episodes: Vec<EpisodeRow> = seeds.iter().flat_map(|s| s.episodes.iter().copied()).collect();
    write_episodes(&dir.join(EPISODES_FILE), &episodes)?;
    let trajectory: Vec<TrajectoryRow> = seeds.iter().flat_map(|s| s.trajectory.iter().copied()).collect();
    write_trajectory(&dir.join(TRAJECTORY_FILE), &trajectory)?;
    if cfg.preset.adapts() && cfg.variant != ControllerVariant::Scratch {
        let rows: Vec<EpisodeRow> = seeds.iter().flat_map(|s| s.meta_train_episodes.iter().copied()).collect();
        write_episodes(&dir.join(META_TRAIN_EPISODES_FILE), &rows)?;
    }
    let metrics = if episodes.is_empty() { Vec::new() } else { compute_metrics(&episodes)? };
    write_metrics(&dir.join(METRICS_FILE), &metrics)?;
    Ok(RunReport {
        dir,
        config: cfg.clone(),
        seeds,
        metrics,
    })
}

/// Recomputes `metrics.csv` from the `episodes.csv` in `dir`.
pub fn recompute_metrics(dir: &Path) -> Result<Vec<MetricsRow>> {
    let rows: Vec<EpisodeRow> = read_csv(&dir.join(EPISODES_FILE))?;
    let metrics = compute_metrics(&rows)?;
    write_metrics(&dir.join(METRICS_FILE), &metrics)?;
    Ok(metrics)
}

/// Writes `embeddings.csv` into `dir` from a saved checkpoint.
pub fn export_checkpoint_embeddings(checkpoint: &Path, dir: &Path) -> Result<Vec<EmbeddingRow>> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let rows = export_from_checkpoint(&ckpt)?;
    create_dir(dir)?;
    write_embeddings(&dir.join(EMBEDDINGS_FILE), &rows)?;
    Ok(rows)
}
