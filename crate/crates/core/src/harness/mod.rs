//! Experiment presets, configuration, metrics and result files.

pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod records;
pub mod run;

pub use checkpoint::{Checkpoint, Stage};
pub use config::{default_output_root, ControllerVariant, ExperimentConfig, Preset, OUTPUT_ROOT_VAR};
pub use metrics::{compute_metrics, iqr_bands, moving_average, Bands, MetricsRow};
pub use records::{EpisodeRow, TrajectoryRow};
pub use run::{
    eval_schedule, export_checkpoint_embeddings, export_from_checkpoint, fixed_eval_schedule, recompute_metrics,
    run_experiment, run_seed, RunReport, SeedOutcome,
};
