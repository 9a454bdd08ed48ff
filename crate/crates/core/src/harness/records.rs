//! CSV row types and readers/writers with fixed headers.

use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::meta::EmbeddingRow;
use crate::{Error, Result};

pub const EPISODES_FILE: &str = "episodes.csv";
pub const META_TRAIN_EPISODES_FILE: &str = "meta_train_episodes.csv";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const EMBEDDINGS_FILE: &str = "embeddings.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub seed: u64,
    pub task_id: u32,
    pub episode: usize,
    pub cum_reward: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub seed: u64,
    pub task_id: u32,
    pub episode: usize,
    pub t_seconds: f64,
    pub setpoint: f64,
    pub output: f64,
    pub action: f64,
    pub reward: f64,
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    csv::Reader::from_reader(file)
        .deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(Error::from)
}

pub const EPISODES_HEADER: [&str; 4] = ["seed", "task_id", "episode", "cum_reward"];
pub const TRAJECTORY_HEADER: [&str; 8] = [
    "seed", "task_id", "episode", "t_seconds", "setpoint", "output", "action", "reward",
];
pub const EMBEDDINGS_HEADER: [&str; 4] = ["task_id", "z1", "z2", "z3"];
pub const METRICS_HEADER: [&str; 5] = ["episode", "q1", "median", "q3", "moving_avg_median"];

pub fn write_episodes(path: &Path, rows: &[EpisodeRow]) -> Result<()> {
    write_csv(path, rows, &EPISODES_HEADER)
}

pub fn write_trajectory(path: &Path, rows: &[TrajectoryRow]) -> Result<()> {
    write_csv(path, rows, &TRAJECTORY_HEADER)
}

pub fn write_embeddings(path: &Path, rows: &[EmbeddingRow]) -> Result<()> {
    write_csv(path, rows, &EMBEDDINGS_HEADER)
}

pub fn write_metrics(path: &Path, rows: &[super::metrics::MetricsRow]) -> Result<()> {
    write_csv(path, rows, &METRICS_HEADER)
}
