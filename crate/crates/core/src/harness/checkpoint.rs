//! Serialized controller state: networks with their optimizer moments, the
//! encoder, the resolved config and the recent context of every task buffer.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::ddpg::ReplayBuffer;
use crate::meta::MetaController;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    MetaTrained,
    Adapted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub stage: Stage,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub controller: MetaController,
    /// The last `recency_window` transitions of each task.
    pub buffers: Vec<ReplayBuffer>,
}

impl Checkpoint {
    pub fn new(
        stage: Stage,
        seed: u64,
        config: &ExperimentConfig,
        controller: &MetaController,
        buffers: &[ReplayBuffer],
    ) -> Self {
        let window = config.recency_window;
        let buffers = buffers
            .iter()
            .map(|b| {
                let mut tail = ReplayBuffer::new(b.task_id(), b.capacity());
                tail.extend(b.iter_in_order().skip(b.len().saturating_sub(window)).cloned());
                tail
            })
            .collect();
        Self {
            stage,
            seed,
            config: config.clone(),
            controller: controller.clone(),
            buffers,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
