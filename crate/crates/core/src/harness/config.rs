//! Flat TOML experiment configuration with preset inheritance.
//!
//! A config file is a single TOML table of `key = value` pairs, no sections.
//! Resolution starts from the defaults of the named preset (the `preset` key,
//! or the preset given on the command line) and overwrites every key present in
//! the file. Unknown keys are errors. The fully resolved table is written as
//! `config.toml` next to the results and can be fed back in unchanged.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ddpg::AgentConfig;
use crate::env::{Experiment, StateVariant, TaskSetConfig};
use crate::meta::{AdaptConfig, EmbeddingMode, EncoderConfig, EnvConfig, LatentRegularizer, MetaHyperparams};
use crate::{Error, Result};

/// Environment variable holding the default output root.
pub const OUTPUT_ROOT_VAR: &str = "METACTL_OUT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    BinaryGain,
    FirstOrderGeneralize,
    FirstOrderAdapt,
    EmbeddingExport,
    ObjectivesGeneralize,
    ObjectivesAdapt,
}

impl Preset {
    pub const ALL: [Preset; 6] = [
        Preset::BinaryGain,
        Preset::FirstOrderGeneralize,
        Preset::FirstOrderAdapt,
        Preset::EmbeddingExport,
        Preset::ObjectivesGeneralize,
        Preset::ObjectivesAdapt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::BinaryGain => "binary-gain",
            Preset::FirstOrderGeneralize => "first-order-generalize",
            Preset::FirstOrderAdapt => "first-order-adapt",
            Preset::EmbeddingExport => "embedding-export",
            Preset::ObjectivesGeneralize => "objectives-generalize",
            Preset::ObjectivesAdapt => "objectives-adapt",
        }
    }

    pub fn experiment(self) -> Experiment {
        match self {
            Preset::BinaryGain => Experiment::BinaryGain,
            Preset::FirstOrderGeneralize | Preset::FirstOrderAdapt | Preset::EmbeddingExport => {
                Experiment::FirstOrderDynamics
            }
            Preset::ObjectivesGeneralize | Preset::ObjectivesAdapt => Experiment::ControlObjectives,
        }
    }

    pub fn adapts(self) -> bool {
        matches!(self, Preset::FirstOrderAdapt | Preset::ObjectivesAdapt)
    }
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Unknown {
                kind: "preset",
                name: s.to_string(),
            })
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ControllerVariant {
    /// Deterministic embedding.
    DE,
    /// Probabilistic embedding.
    PE,
    /// Multi-task controller without embedding.
    NoEmbed,
    /// Untrained controller without embedding, adapted from scratch.
    Scratch,
}

impl ControllerVariant {
    pub const ALL: [ControllerVariant; 4] = [
        ControllerVariant::DE,
        ControllerVariant::PE,
        ControllerVariant::NoEmbed,
        ControllerVariant::Scratch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ControllerVariant::DE => "DE",
            ControllerVariant::PE => "PE",
            ControllerVariant::NoEmbed => "NoEmbed",
            ControllerVariant::Scratch => "Scratch",
        }
    }

    pub fn embedding(self) -> Option<EmbeddingMode> {
        match self {
            ControllerVariant::DE => Some(EmbeddingMode::Deterministic),
            ControllerVariant::PE => Some(EmbeddingMode::Probabilistic),
            ControllerVariant::NoEmbed | ControllerVariant::Scratch => None,
        }
    }

    pub fn state_variant(self, experiment: Experiment) -> StateVariant {
        match (self.embedding(), experiment) {
            (Some(_), _) | (None, Experiment::BinaryGain) => StateVariant::MetaBase,
            (None, Experiment::FirstOrderDynamics) => StateVariant::NoEmbedDynamics,
            (None, Experiment::ControlObjectives) => StateVariant::NoEmbedObjectives,
        }
    }
}

impl FromStr for ControllerVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ControllerVariant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Unknown {
                kind: "controller variant",
                name: s.to_string(),
            })
    }
}

impl fmt::Display for ControllerVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub variant: ControllerVariant,
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_root: Option<PathBuf>,

    pub train_episodes: usize,
    pub train_steps_per_episode: usize,
    pub adapt_episodes: usize,
    pub adapt_steps_per_episode: usize,
    pub eval_episodes: usize,
    pub export_draws: usize,
    pub context_episodes: usize,

    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub beta_latent: f64,
    pub context_size: usize,
    pub recency_window: usize,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,

    pub hidden: Vec<usize>,
    pub encoder_hidden: Vec<usize>,
    pub feature_dim: usize,
    pub pe_regularizer: LatentRegularizer,
    pub gamma: f64,
    pub tau: f64,
    pub action_bound: f64,
    pub explore_std: f64,
    pub final_layer_scale: f64,

    pub n_setpoints: usize,
    pub steps_per_setpoint: usize,
    pub setpoint_low: f64,
    pub setpoint_high: f64,
    pub noise_std: f64,
    pub initial_output: f64,
    pub dt: f64,
    pub integral_limit: f64,

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

impl ExperimentConfig {
    /// Defaults of `preset`; runnable as is.
    pub fn preset(preset: Preset) -> Self {
        let hp = MetaHyperparams::default();
        let env = EnvConfig::default();
        let agent = AgentConfig::new(0, 0);
        let enc = EncoderConfig::new(EmbeddingMode::Deterministic);
        let tasks = TaskSetConfig::default();
        let (train_episodes, adapt_episodes) = match preset {
            Preset::BinaryGain | Preset::ObjectivesGeneralize => (60, 0),
            Preset::FirstOrderGeneralize | Preset::EmbeddingExport => (40, 0),
            Preset::FirstOrderAdapt => (40, 50),
            Preset::ObjectivesAdapt => (60, 50),
        };
        Self {
            preset,
            variant: ControllerVariant::DE,
            seeds: (0..10).collect(),
            output_root: None,
            train_episodes,
            train_steps_per_episode: hp.train_steps_per_episode,
            adapt_episodes,
            adapt_steps_per_episode: hp.train_steps_per_episode,
            eval_episodes: 3,
            export_draws: 10,
            context_episodes: 2,
            alpha1: hp.alpha1,
            alpha2: hp.alpha2,
            alpha3: hp.alpha3,
            beta_latent: hp.beta_latent,
            context_size: hp.context_size,
            recency_window: hp.recency_window,
            batch_size: hp.batch_size,
            buffer_capacity: hp.buffer_capacity,
            adam_beta1: hp.adam_beta1,
            adam_beta2: hp.adam_beta2,
            adam_epsilon: hp.adam_epsilon,
            hidden: agent.hidden,
            encoder_hidden: enc.hidden,
            feature_dim: enc.feature_dim,
            pe_regularizer: enc.regularizer,
            gamma: agent.gamma,
            tau: agent.tau,
            action_bound: agent.action_bound,
            explore_std: agent.explore_std,
            final_layer_scale: agent.final_layer_scale,
            n_setpoints: env.n_setpoints,
            steps_per_setpoint: env.steps_per_setpoint,
            setpoint_low: env.setpoint_low,
            setpoint_high: env.setpoint_high,
            noise_std: env.noise_std,
            initial_output: env.initial_output,
            dt: env.dt,
            integral_limit: env.integral_limit,
            grid_gains: tasks.grid_gains,
            grid_time_constants: tasks.grid_time_constants,
            held_out_gain: tasks.held_out_gain,
            held_out_time_constant: tasks.held_out_time_constant,
            penalty_alpha: tasks.penalty_alpha,
            penalty_beta_action: tasks.penalty_beta_action,
            penalty_delta: tasks.penalty_delta,
            test_alpha: tasks.test_alpha,
            test_beta_action: tasks.test_beta_action,
            overshoot_sign_as_printed: tasks.overshoot_sign_as_printed,
        }
    }

    /// Resolves `text` on top of its preset. `preset` supplies the preset when
    /// the file has none and must agree with it otherwise.
    pub fn from_toml_str(text: &str, preset: Option<Preset>) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let named = match table.get("preset") {
            Some(toml::Value::String(s)) => Some(s.parse::<Preset>()?),
            Some(other) => return Err(Error::Config(format!("preset must be a string, got {other}"))),
            None => None,
        };
        let preset = match (named, preset) {
            (Some(a), Some(b)) if a != b => {
                return Err(Error::Config(format!("config is for preset {a} but {b} was requested")))
            }
            (Some(p), _) | (None, Some(p)) => p,
            (None, None) => return Err(Error::Config("no preset given".into())),
        };
        let mut merged = match toml::Value::try_from(Self::preset(preset)) {
            Ok(toml::Value::Table(t)) => t,
            _ => unreachable!("config serializes to a table"),
        };
        merged.extend(table);
        let cfg: Self = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, preset: Option<Preset>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, preset)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.variant == ControllerVariant::Scratch && !self.preset.adapts() {
            return Err(Error::Config(format!(
                "variant Scratch only applies to adaptation presets, not {}",
                self.preset
            )));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) || self.encoder_hidden.contains(&0) || self.feature_dim == 0
        {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        self.hyperparams().validate()?;
        self.env().validate()?;
        self.agent_config(self.state_variant()).validate()?;
        if self.preset.experiment() == Experiment::FirstOrderDynamics && self.grid_gains.is_empty() {
            return Err(Error::Config("the task grid is empty".into()));
        }
        Ok(())
    }

    pub fn with_seed_count(mut self, n: usize) -> Self {
        let first = self.seeds.first().copied().unwrap_or(0);
        self.seeds = (first..first + n as u64).collect();
        self
    }

    pub fn hyperparams(&self) -> MetaHyperparams {
        MetaHyperparams {
            alpha1: self.alpha1,
            alpha2: self.alpha2,
            alpha3: self.alpha3,
            beta_latent: self.beta_latent,
            context_size: self.context_size,
            recency_window: self.recency_window,
            batch_size: self.batch_size,
            train_episodes: self.train_episodes,
            train_steps_per_episode: self.train_steps_per_episode,
            buffer_capacity: self.buffer_capacity,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_epsilon: self.adam_epsilon,
        }
    }

    pub fn adapt_config(&self) -> AdaptConfig {
        AdaptConfig {
            episodes: self.adapt_episodes,
            train_steps_per_episode: self.adapt_steps_per_episode,
        }
    }

    pub fn env(&self) -> EnvConfig {
        EnvConfig {
            n_setpoints: self.n_setpoints,
            steps_per_setpoint: self.steps_per_setpoint,
            setpoint_low: self.setpoint_low,
            setpoint_high: self.setpoint_high,
            noise_std: self.noise_std,
            initial_output: self.initial_output,
            dt: self.dt,
            integral_limit: self.integral_limit,
        }
    }

    pub fn task_set(&self) -> TaskSetConfig {
        TaskSetConfig {
            grid_gains: self.grid_gains.clone(),
            grid_time_constants: self.grid_time_constants.clone(),
            held_out_gain: self.held_out_gain,
            held_out_time_constant: self.held_out_time_constant,
            penalty_alpha: self.penalty_alpha,
            penalty_beta_action: self.penalty_beta_action,
            penalty_delta: self.penalty_delta,
            test_alpha: self.test_alpha,
            test_beta_action: self.test_beta_action,
            overshoot_sign_as_printed: self.overshoot_sign_as_printed,
        }
    }

    pub fn state_variant(&self) -> StateVariant {
        self.variant.state_variant(self.preset.experiment())
    }

    pub fn agent_config(&self, state: StateVariant) -> AgentConfig {
        AgentConfig {
            hidden: self.hidden.clone(),
            gamma: self.gamma,
            tau: self.tau,
            action_bound: self.action_bound,
            explore_std: self.explore_std,
            final_layer_scale: self.final_layer_scale,
            ..AgentConfig::new(state.dim(), crate::meta::LATENT_DIM)
        }
    }

    pub fn encoder_config(&self) -> Option<EncoderConfig> {
        self.variant.embedding().map(|mode| EncoderConfig {
            mode,
            hidden: self.encoder_hidden.clone(),
            feature_dim: self.feature_dim,
            regularizer: self.pe_regularizer,
        })
    }

    /// Output root: the configured one, else `$METACTL_OUT`, else `results`.
    pub fn output_root(&self) -> PathBuf {
        self.output_root.clone().unwrap_or_else(default_output_root)
    }

    /// `<root>/<preset>/<variant>`.
    pub fn results_dir(&self) -> PathBuf {
        self.output_root().join(self.preset.name()).join(self.variant.name())
    }
}

pub fn default_output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_VAR)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("results"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_default_is_valid() {
        for p in Preset::ALL {
            let cfg = ExperimentConfig::preset(p);
            cfg.validate().unwrap();
            assert_eq!(cfg.seeds.len(), 10);
            assert_eq!(p.name().parse::<Preset>().unwrap(), p);
        }
        assert!("first-order".parse::<Preset>().is_err());
    }

    #[test]
    fn toml_round_trip_and_inheritance() {
        let cfg = ExperimentConfig::preset(Preset::FirstOrderAdapt);
        let text = cfg.to_toml_string();
        assert_eq!(ExperimentConfig::from_toml_str(&text, None).unwrap(), cfg);

        let over = ExperimentConfig::from_toml_str(
            "preset = \"binary-gain\"\nvariant = \"NoEmbed\"\ntrain_episodes = 3\nalpha2 = 1\nseeds = [4, 5]\n",
            None,
        )
        .unwrap();
        assert_eq!(over.train_episodes, 3);
        assert_eq!(over.alpha2, 1.0);
        assert_eq!(over.seeds, vec![4, 5]);
        assert_eq!(over.variant, ControllerVariant::NoEmbed);
        assert_eq!(over.batch_size, ExperimentConfig::preset(Preset::BinaryGain).batch_size);

        let bare = ExperimentConfig::from_toml_str("", Some(Preset::ObjectivesAdapt)).unwrap();
        assert_eq!(bare, ExperimentConfig::preset(Preset::ObjectivesAdapt));
    }

    #[test]
    fn config_errors() {
        assert!(ExperimentConfig::from_toml_str("", None).is_err());
        assert!(ExperimentConfig::from_toml_str("preset = \"nope\"", None).is_err());
        assert!(ExperimentConfig::from_toml_str("bogus_key = 1", Some(Preset::BinaryGain)).is_err());
        assert!(ExperimentConfig::from_toml_str("preset = \"binary-gain\"", Some(Preset::ObjectivesAdapt)).is_err());
        assert!(ExperimentConfig::from_toml_str("variant = \"Scratch\"", Some(Preset::BinaryGain)).is_err());
        assert!(ExperimentConfig::from_toml_str("variant = \"Scratch\"", Some(Preset::FirstOrderAdapt)).is_ok());
        assert!(ExperimentConfig::from_toml_str("seeds = []", Some(Preset::BinaryGain)).is_err());
        assert!(ExperimentConfig::from_toml_str("gamma = 1.5", Some(Preset::BinaryGain)).is_err());
    }

    #[test]
    fn variant_state_mapping() {
        use ControllerVariant::*;
        assert_eq!(DE.state_variant(Experiment::FirstOrderDynamics), StateVariant::MetaBase);
        assert_eq!(NoEmbed.state_variant(Experiment::BinaryGain), StateVariant::MetaBase);
        assert_eq!(NoEmbed.state_variant(Experiment::FirstOrderDynamics), StateVariant::NoEmbedDynamics);
        assert_eq!(Scratch.state_variant(Experiment::ControlObjectives), StateVariant::NoEmbedObjectives);
        assert_eq!("noembed".parse::<ControllerVariant>().unwrap(), NoEmbed);
    }

    #[test]
    fn seed_count_and_results_dir() {
        let cfg = ExperimentConfig {
            output_root: Some(PathBuf::from("/tmp/x")),
            ..ExperimentConfig::preset(Preset::EmbeddingExport)
        }
        .with_seed_count(3);
        assert_eq!(cfg.seeds, vec![0, 1, 2]);
        assert_eq!(cfg.results_dir(), PathBuf::from("/tmp/x/embedding-export/DE"));
    }
}
