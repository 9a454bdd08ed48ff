//! Setpoint-tracking environment: tasks, state assembly, rewards and episodes.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ddpg::Transition;
use crate::plant::{PlantModel, TransferFunctionSpec};
use crate::{Error, Result};

/// Length of every output/action/reward history.
pub const HISTORY: usize = 4;

/// Weights of the extended reward
/// `−(|y_sp − y| + α|a − a_prev| + β|a| + δ·[overshoot])`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub alpha: f64,
    pub beta_action: f64,
    pub delta: f64,
    /// Fire the overshoot penalty when the error keeps the reference sign
    /// (the literal case table) instead of when it flips.
    #[serde(default)]
    pub overshoot_sign_as_printed: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self::ERROR_ONLY
    }
}

impl RewardConfig {
    pub const ERROR_ONLY: Self = Self {
        alpha: 0.0,
        beta_action: 0.0,
        delta: 0.0,
        overshoot_sign_as_printed: false,
    };

    pub fn new(alpha: f64, beta_action: f64, delta: f64) -> Result<Self> {
        let cfg = Self {
            alpha,
            beta_action,
            delta,
            overshoot_sign_as_printed: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta_action", self.beta_action), ("delta", self.delta)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("reward weight {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn is_error_only(&self) -> bool {
        self.alpha == 0.0 && self.beta_action == 0.0 && self.delta == 0.0
    }
}

pub fn reward_basic(error: f64) -> f64 {
    -error.abs()
}

/// True when the overshoot penalty applies at this step.
pub fn overshoot_fires(setpoint: f64, output: f64, reference: f64, as_printed: bool) -> bool {
    let product = (setpoint - output) * (setpoint - reference);
    if as_printed {
        product > 0.0
    } else {
        product < 0.0
    }
}

pub fn reward_extended(
    setpoint: f64,
    output: f64,
    action: f64,
    prev_action: f64,
    reference: f64,
    cfg: &RewardConfig,
) -> f64 {
    let mut cost = (setpoint - output).abs();
    cost += cfg.alpha * (action - prev_action).abs();
    cost += cfg.beta_action * action.abs();
    if cfg.delta != 0.0 && overshoot_fires(setpoint, output, reference, cfg.overshoot_sign_as_printed) {
        cost += cfg.delta;
    }
    -cost
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StateVariant {
    /// `(y_t..y_{t−3}, e_t, I_t)`
    MetaBase,
    /// `(y_t..y_{t−3}, a_{t−1}..a_{t−4}, e_t, I_t)`
    NoEmbedDynamics,
    /// `(y_t..y_{t−3}, a_{t−1}..a_{t−4}, r_{t−1}..r_{t−4}, e_t, I_t)`
    NoEmbedObjectives,
}

impl StateVariant {
    pub const fn dim(self) -> usize {
        match self {
            StateVariant::MetaBase => 6,
            StateVariant::NoEmbedDynamics => 10,
            StateVariant::NoEmbedObjectives => 14,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskRole {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: u32,
    pub plant: TransferFunctionSpec,
    pub reward: RewardConfig,
    pub role: TaskRole,
}

/// A sequence of setpoints, each held for a fixed number of samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetpointSchedule {
    pub values: Vec<f64>,
    pub steps_per_setpoint: usize,
}

impl SetpointSchedule {
    pub fn constant(value: f64, steps: usize) -> Self {
        Self {
            values: vec![value],
            steps_per_setpoint: steps,
        }
    }

    pub fn total_steps(&self) -> usize {
        self.values.len() * self.steps_per_setpoint
    }

    /// Setpoint in force during sample `step` (clamped to the last value).
    pub fn at(&self, step: usize) -> f64 {
        let idx = (step / self.steps_per_setpoint.max(1)).min(self.values.len() - 1);
        self.values[idx]
    }

    /// Whether a new setpoint takes effect at `step` (never at step 0).
    pub fn changes_at(&self, step: usize) -> bool {
        step > 0 && step < self.total_steps() && step % self.steps_per_setpoint == 0
    }
}

/// Draws `n_changes` setpoints uniformly from `[low, high]`, consecutive values distinct.
pub fn setpoint_schedule<R: Rng + ?Sized>(
    rng: &mut R,
    n_changes: usize,
    range: (f64, f64),
    steps_per_setpoint: usize,
) -> Result<SetpointSchedule> {
    let (low, high) = range;
    if n_changes == 0 {
        return Err(Error::Config("schedule needs at least one setpoint".into()));
    }
    if !(low < high) || !low.is_finite() || !high.is_finite() {
        return Err(Error::Config(format!("setpoint range [{low}, {high}] is empty")));
    }
    if steps_per_setpoint == 0 {
        return Err(Error::Config("steps per setpoint must be positive".into()));
    }
    let mut values: Vec<f64> = Vec::with_capacity(n_changes);
    while values.len() < n_changes {
        let v = rng.random_range(low..=high);
        if values.last() != Some(&v) {
            values.push(v);
        }
    }
    Ok(SetpointSchedule {
        values,
        steps_per_setpoint,
    })
}

/// Per-episode bookkeeping. Histories hold the most recent entry first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeState {
    pub outputs: [f64; HISTORY],
    pub actions: [f64; HISTORY],
    pub rewards: [f64; HISTORY],
    pub setpoint: f64,
    pub integral: f64,
    pub reference: f64,
    pub step_index: usize,
    pub dt: f64,
    /// Anti-windup bound on `|integral|`; infinite means unbounded.
    pub integral_limit: f64,
    pub schedule: SetpointSchedule,
}

impl EpisodeState {
    /// Fresh episode with output histories filled by the first measurement and
    /// zeroed action/reward histories.
    pub fn start(schedule: SetpointSchedule, initial_output: f64, dt: f64) -> Self {
        Self {
            outputs: [initial_output; HISTORY],
            actions: [0.0; HISTORY],
            rewards: [0.0; HISTORY],
            setpoint: schedule.at(0),
            integral: 0.0,
            reference: initial_output,
            step_index: 0,
            dt,
            integral_limit: f64::INFINITY,
            schedule,
        }
    }

    pub fn with_integral_limit(mut self, limit: f64) -> Self {
        self.integral_limit = limit;
        self
    }

    pub fn error(&self) -> f64 {
        self.setpoint - self.outputs[0]
    }

    pub fn is_done(&self) -> bool {
        self.step_index >= self.schedule.total_steps()
    }

    pub fn prev_action(&self) -> f64 {
        self.actions[0]
    }
}

/// Assembles the observation for `variant`, in the order the components are listed.
pub fn build_state(ep: &EpisodeState, variant: StateVariant) -> Vec<f64> {
    let mut s = Vec::with_capacity(variant.dim());
    s.extend_from_slice(&ep.outputs);
    match variant {
        StateVariant::MetaBase => {}
        StateVariant::NoEmbedDynamics => s.extend_from_slice(&ep.actions),
        StateVariant::NoEmbedObjectives => {
            s.extend_from_slice(&ep.actions);
            s.extend_from_slice(&ep.rewards);
        }
    }
    s.push(ep.error());
    s.push(ep.integral);
    s
}

fn push_front(hist: &mut [f64; HISTORY], v: f64) {
    hist.copy_within(0..HISTORY - 1, 1);
    hist[0] = v;
}

/// Detail of one environment step beyond the stored transition.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    pub setpoint: f64,
    pub output: f64,
    pub error: f64,
}

/// Applies `action` (clamped to `±action_bound`) for one sample and returns the
/// transition together with the setpoint/output pair the reward was scored on.
#[allow(clippy::too_many_arguments)]
pub fn env_step<R: Rng + ?Sized>(
    task: &Task,
    variant: StateVariant,
    plant: &mut PlantModel,
    ep: &mut EpisodeState,
    action: f64,
    action_bound: f64,
    rng: &mut R,
) -> Result<(Transition, StepInfo)> {
    if !action.is_finite() {
        return Err(Error::NonFinite("action"));
    }
    let action = action.clamp(-action_bound, action_bound);
    let state = build_state(ep, variant);
    let setpoint = ep.setpoint;
    let y = plant.step(action, rng)?;
    let error = setpoint - y;
    let reward = if task.reward.is_error_only() {
        reward_basic(error)
    } else {
        reward_extended(setpoint, y, action, ep.prev_action(), ep.reference, &task.reward)
    };
    push_front(&mut ep.outputs, y);
    push_front(&mut ep.actions, action);
    push_front(&mut ep.rewards, reward);
    ep.integral = (ep.integral + error * ep.dt).clamp(-ep.integral_limit, ep.integral_limit);
    ep.step_index += 1;
    if ep.schedule.changes_at(ep.step_index) {
        ep.setpoint = ep.schedule.at(ep.step_index);
        ep.reference = y;
    }
    let transition = Transition {
        state,
        action,
        reward,
        next_state: build_state(ep, variant),
        done: ep.is_done(),
        task_id: task.id,
    };
    Ok((
        transition,
        StepInfo {
            setpoint,
            output: y,
            error,
        },
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Experiment {
    BinaryGain,
    FirstOrderDynamics,
    ControlObjectives,
}

impl FromStr for Experiment {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['_', ' '], "-").as_str() {
            "binary-gain" => Ok(Experiment::BinaryGain),
            "first-order-dynamics" | "first-order" => Ok(Experiment::FirstOrderDynamics),
            "control-objectives" | "objectives" => Ok(Experiment::ControlObjectives),
            _ => Err(Error::Unknown {
                kind: "experiment",
                name: s.to_string(),
            }),
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Experiment::BinaryGain => "binary-gain",
            Experiment::FirstOrderDynamics => "first-order-dynamics",
            Experiment::ControlObjectives => "control-objectives",
        })
    }
}

/// Parameters behind the task sets; every field is overridable from config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSetConfig {
    pub grid_gains: Vec<f64>,
    pub grid_time_constants: Vec<f64>,
    pub held_out_gain: f64,
    pub held_out_time_constant: f64,
    pub penalty_alpha: f64,
    pub penalty_beta_action: f64,
    pub penalty_delta: f64,
    pub test_alpha: f64,
    pub test_beta_action: f64,
    pub overshoot_sign_as_printed: bool,
}

impl Default for TaskSetConfig {
    fn default() -> Self {
        Self {
            grid_gains: vec![-2.0, -1.0, 1.0, 2.0],
            grid_time_constants: vec![0.5, 1.0, 1.5, 2.0],
            held_out_gain: -1.0,
            held_out_time_constant: 2.0,
            penalty_alpha: 0.1,
            penalty_beta_action: 0.1,
            penalty_delta: 0.5,
            test_alpha: 0.1,
            test_beta_action: 0.1,
            overshoot_sign_as_printed: false,
        }
    }
}

pub fn make_task_set(experiment: Experiment) -> Vec<Task> {
    make_task_set_with(experiment, &TaskSetConfig::default())
}

pub fn make_task_set_with(experiment: Experiment, cfg: &TaskSetConfig) -> Vec<Task> {
    let train = |id: u32, plant: TransferFunctionSpec, reward: RewardConfig| Task {
        id,
        plant,
        reward,
        role: TaskRole::Train,
    };
    match experiment {
        Experiment::BinaryGain => vec![
            train(0, TransferFunctionSpec::first_order(1.0, 1.0), RewardConfig::ERROR_ONLY),
            train(1, TransferFunctionSpec::first_order(-1.0, 1.0), RewardConfig::ERROR_ONLY),
        ],
        Experiment::FirstOrderDynamics => {
            let mut tasks = Vec::new();
            for &k in &cfg.grid_gains {
                for &tau in &cfg.grid_time_constants {
                    if k == cfg.held_out_gain && tau == cfg.held_out_time_constant {
                        continue;
                    }
                    let id = tasks.len() as u32;
                    tasks.push(train(id, TransferFunctionSpec::first_order(k, tau), RewardConfig::ERROR_ONLY));
                }
            }
            let id = tasks.len() as u32;
            tasks.push(Task {
                id,
                plant: TransferFunctionSpec::first_order(cfg.held_out_gain, cfg.held_out_time_constant),
                reward: RewardConfig::ERROR_ONLY,
                role: TaskRole::Test,
            });
            tasks
        }
        Experiment::ControlObjectives => {
            let plant = TransferFunctionSpec {
                gain: 1.0,
                time_constant: 1.0,
                order: 3,
            };
            let reward = |alpha, beta_action, delta| RewardConfig {
                alpha,
                beta_action,
                delta,
                overshoot_sign_as_printed: cfg.overshoot_sign_as_printed,
            };
            vec![
                train(0, plant, reward(0.0, 0.0, 0.0)),
                train(1, plant, reward(cfg.penalty_alpha, 0.0, 0.0)),
                train(2, plant, reward(0.0, cfg.penalty_beta_action, 0.0)),
                train(3, plant, reward(0.0, 0.0, cfg.penalty_delta)),
                Task {
                    id: 4,
                    plant,
                    reward: reward(cfg.test_alpha, cfg.test_beta_action, 0.0),
                    role: TaskRole::Test,
                },
            ]
        }
    }
}

pub fn train_tasks(tasks: &[Task]) -> Vec<Task> {
    tasks.iter().filter(|t| t.role == TaskRole::Train).cloned().collect()
}

pub fn test_tasks(tasks: &[Task]) -> Vec<Task> {
    tasks.iter().filter(|t| t.role == TaskRole::Test).cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::{discretize, SAMPLE_TIME};
    use crate::rng;
    use proptest::prelude::*;

    fn episode(values: Vec<f64>, steps: usize) -> EpisodeState {
        EpisodeState::start(
            SetpointSchedule {
                values,
                steps_per_setpoint: steps,
            },
            0.0,
            SAMPLE_TIME,
        )
    }

    #[test]
    fn basic_reward() {
        assert_eq!(reward_basic(0.0), 0.0);
        assert_eq!(reward_basic(0.5), -0.5);
        assert_eq!(reward_basic(-0.3), -0.3);
    }

    #[test]
    fn extended_reward_hand_cases() {
        let zero = RewardConfig::ERROR_ONLY;
        assert!((reward_extended(1.0, 0.8, 0.5, 0.3, 0.0, &zero) + 0.2).abs() < 1e-12);
        let cfg = RewardConfig::new(0.1, 0.05, 0.0).unwrap();
        assert!((reward_extended(1.0, 0.8, 0.5, 0.3, 0.0, &cfg) + 0.245).abs() < 1e-12);
        let cfg = RewardConfig::new(0.0, 0.0, 0.5).unwrap();
        assert!((reward_extended(1.0, 1.1, 0.0, 0.0, 0.0, &cfg) + 0.6).abs() < 1e-12);
        // Approaching from below without crossing: no penalty.
        assert!((reward_extended(1.0, 0.9, 0.0, 0.0, 0.0, &cfg) + 0.1).abs() < 1e-12);
        let printed = RewardConfig {
            overshoot_sign_as_printed: true,
            ..cfg
        };
        assert!((reward_extended(1.0, 1.1, 0.0, 0.0, 0.0, &printed) + 0.1).abs() < 1e-12);
        assert!((reward_extended(1.0, 0.9, 0.0, 0.0, 0.0, &printed) + 0.6).abs() < 1e-12);
    }

    #[test]
    fn reward_config_validation() {
        assert!(RewardConfig::new(-0.1, 0.0, 0.0).is_err());
        assert!(RewardConfig::new(0.0, f64::NAN, 0.0).is_err());
        assert!(RewardConfig::new(0.1, 0.1, 0.5).is_ok());
    }

    #[test]
    fn state_assembly() {
        let mut ep = episode(vec![1.0], 40);
        ep.outputs = [0.2, 0.1, 0.0, 0.0];
        ep.integral = 0.35;
        let s = build_state(&ep, StateVariant::MetaBase);
        let expect = [0.2, 0.1, 0.0, 0.0, 0.8, 0.35];
        assert_eq!(s.len(), 6);
        for (a, b) in s.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        ep.actions = [0.5, 0.4, 0.3, 0.2];
        let s = build_state(&ep, StateVariant::NoEmbedDynamics);
        assert_eq!(s.len(), 10);
        assert_eq!(&s[4..8], &[0.5, 0.4, 0.3, 0.2]);
        assert!((s[8] - 0.8).abs() < 1e-15);
        ep.rewards = [-0.1, -0.2, -0.3, -0.4];
        let s = build_state(&ep, StateVariant::NoEmbedObjectives);
        assert_eq!(s.len(), 14);
        assert_eq!(&s[8..12], &[-0.1, -0.2, -0.3, -0.4]);
        assert_eq!(s[13], 0.35);

        let fresh = episode(vec![0.5], 40);
        assert_eq!(build_state(&fresh, StateVariant::MetaBase), vec![0.0, 0.0, 0.0, 0.0, 0.5, 0.0]);
    }

    #[test]
    fn schedules() {
        let a = setpoint_schedule(&mut rng::stream(3, &[]), 10, (0.1, 1.0), 40).unwrap();
        let b = setpoint_schedule(&mut rng::stream(3, &[]), 10, (0.1, 1.0), 40).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.values.len(), 10);
        assert_eq!(a.total_steps(), 400);
        assert!(a.values.iter().all(|v| (0.1..=1.0).contains(v)));
        assert!(a.values.windows(2).all(|w| w[0] != w[1]));
        let one = setpoint_schedule(&mut rng::stream(3, &[]), 1, (0.1, 1.0), 40).unwrap();
        assert_eq!(one.values.len(), 1);
        assert!(setpoint_schedule(&mut rng::stream(3, &[]), 0, (0.1, 1.0), 40).is_err());
        assert!(setpoint_schedule(&mut rng::stream(3, &[]), 3, (1.0, 0.1), 40).is_err());
        assert!(a.changes_at(40) && !a.changes_at(0) && !a.changes_at(41) && !a.changes_at(400));
    }

    fn unit_task(reward: RewardConfig) -> Task {
        Task {
            id: 7,
            plant: TransferFunctionSpec::first_order(1.0, 1.0),
            reward,
            role: TaskRole::Train,
        }
    }

    #[test]
    fn equilibrium_step() {
        let task = unit_task(RewardConfig::ERROR_ONLY);
        let mut plant = discretize(task.plant, SAMPLE_TIME, 0.0).unwrap();
        let mut ep = episode(vec![0.0], 10);
        let mut r = rng::stream(0, &[]);
        let (t, _) = env_step(&task, StateVariant::MetaBase, &mut plant, &mut ep, 0.0, 2.0, &mut r).unwrap();
        assert_eq!(t.reward, 0.0);
        assert!(t.next_state.iter().all(|&v| v == 0.0));
        assert_eq!(t.task_id, 7);
        assert!(!t.done);
        assert!(env_step(&task, StateVariant::MetaBase, &mut plant, &mut ep, f64::NAN, 2.0, &mut r).is_err());
    }

    #[test]
    fn integral_is_clamped_to_limit() {
        let task = unit_task(RewardConfig::ERROR_ONLY);
        let mut plant = discretize(task.plant, SAMPLE_TIME, 0.0).unwrap();
        let mut ep = EpisodeState::start(SetpointSchedule::constant(1.0, 50), 0.0, SAMPLE_TIME).with_integral_limit(2.0);
        let mut r = rng::stream(0, &[]);
        for _ in 0..50 {
            env_step(&task, StateVariant::MetaBase, &mut plant, &mut ep, -2.0, 2.0, &mut r).unwrap();
            assert!(ep.integral <= 2.0);
        }
        assert_eq!(ep.integral, 2.0);
        let ep = EpisodeState::start(SetpointSchedule::constant(1.0, 1), 0.0, SAMPLE_TIME);
        assert_eq!(ep.integral_limit, f64::INFINITY);
    }

    #[test]
    fn integral_and_reference_bookkeeping() {
        // A unit-gain plant held at y = 0.6 by u = 0.6 with setpoint 1.0 gives e = 0.4.
        let task = unit_task(RewardConfig::ERROR_ONLY);
        let mut plant = discretize(task.plant, SAMPLE_TIME, 0.0).unwrap();
        plant.reset(0.6);
        let mut ep = EpisodeState::start(
            SetpointSchedule {
                values: vec![1.0, 0.2],
                steps_per_setpoint: 3,
            },
            0.6,
            SAMPLE_TIME,
        );
        let mut r = rng::stream(0, &[]);
        for _ in 0..3 {
            env_step(&task, StateVariant::MetaBase, &mut plant, &mut ep, 0.6, 2.0, &mut r).unwrap();
        }
        assert!((ep.integral - 0.6).abs() < 1e-12);
        // The change took effect at step 3 and the reference is the output measured there.
        assert_eq!(ep.setpoint, 0.2);
        assert_eq!(ep.reference, ep.outputs[0]);
        let (t, _) = env_step(&task, StateVariant::MetaBase, &mut plant, &mut ep, 5.0, 2.0, &mut r).unwrap();
        assert_eq!(t.action, 2.0);
        assert_eq!(ep.actions[0], 2.0);
        for _ in 0..2 {
            env_step(&task, StateVariant::MetaBase, &mut plant, &mut ep, 0.0, 2.0, &mut r).unwrap();
        }
        assert!(ep.is_done());
    }

    #[test]
    fn task_sets() {
        let bg = make_task_set(Experiment::BinaryGain);
        assert_eq!(bg.len(), 2);
        assert_eq!(bg[0].plant.gain, 1.0);
        assert_eq!(bg[1].plant.gain, -1.0);
        assert!(bg.iter().all(|t| t.plant.time_constant == 1.0));

        let fo = make_task_set(Experiment::FirstOrderDynamics);
        assert_eq!(train_tasks(&fo).len(), 15);
        let test = test_tasks(&fo);
        assert_eq!(test.len(), 1);
        assert_eq!((test[0].plant.gain, test[0].plant.time_constant), (-1.0, 2.0));
        let mut ids: Vec<u32> = fo.iter().map(|t| t.id).collect();
        ids.dedup();
        assert_eq!(ids.len(), 16);

        let co = make_task_set(Experiment::ControlObjectives);
        assert_eq!(train_tasks(&co).len(), 4);
        assert_eq!(test_tasks(&co).len(), 1);
        assert!(co.iter().all(|t| t.plant == co[0].plant && t.plant.order == 3));
        let test = &test_tasks(&co)[0];
        assert!(test.reward.alpha > 0.0 && test.reward.beta_action > 0.0 && test.reward.delta == 0.0);

        assert!("nonsense".parse::<Experiment>().is_err());
        assert_eq!("binary-gain".parse::<Experiment>().unwrap(), Experiment::BinaryGain);
    }

    #[test]
    fn extended_equals_basic_on_grid() {
        let zero = RewardConfig::ERROR_ONLY;
        let grid: Vec<f64> = (-20..=20).map(|i| i as f64 * 0.1).collect();
        for &sp in &grid {
            for &y in &grid {
                for &a in &[-2.0, 0.0, 1.3] {
                    assert_eq!(reward_extended(sp, y, a, -a, y * 0.5, &zero), reward_basic(sp - y));
                }
            }
        }
    }

    proptest! {
        #[test]
        fn overshoot_never_fires_between_reference_and_setpoint(
            sp in -2.0f64..2.0, yref in -2.0f64..2.0, frac in 0.001f64..0.999,
        ) {
            prop_assume!((sp - yref).abs() > 1e-6);
            let y = yref + frac * (sp - yref);
            prop_assert!(!overshoot_fires(sp, y, yref, false));
        }

        #[test]
        fn overshoot_branches_are_exclusive(sp in -2.0f64..2.0, y in -2.0f64..2.0, yref in -2.0f64..2.0) {
            let prose = overshoot_fires(sp, y, yref, false);
            let printed = overshoot_fires(sp, y, yref, true);
            prop_assert!(!(prose && printed));
            let flipped = (sp - y).signum() != (sp - yref).signum() && sp != y && sp != yref;
            prop_assert_eq!(prose, flipped);
        }

        #[test]
        fn state_dims_and_integral_telescoping(actions in proptest::collection::vec(-3.0f64..3.0, 1..60)) {
            let task = unit_task(RewardConfig::new(0.1, 0.1, 0.5).unwrap());
            for variant in [StateVariant::MetaBase, StateVariant::NoEmbedDynamics, StateVariant::NoEmbedObjectives] {
                let mut plant = discretize(task.plant, SAMPLE_TIME, 0.01).unwrap();
                let mut ep = episode(vec![0.3, 0.9, 0.5], 20);
                let mut r = rng::stream(1, &[]);
                prop_assert_eq!(build_state(&ep, variant).len(), variant.dim());
                for &a in &actions {
                    let before = ep.integral;
                    let (t, info) = env_step(&task, variant, &mut plant, &mut ep, a, 2.0, &mut r).unwrap();
                    prop_assert_eq!(t.state.len(), variant.dim());
                    prop_assert_eq!(t.next_state.len(), variant.dim());
                    prop_assert_eq!(ep.integral, before + info.error * SAMPLE_TIME);
                }
            }
        }
    }
}
