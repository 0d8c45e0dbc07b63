//! Run configuration: one JSON document covering every stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::head::HeadConfig;
use crate::memory::MemoryConfig;
use crate::model::ModelConfig;
use crate::prompter::PrompterConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputConfig {
    pub rgb_frames: usize,
    pub event_frames: usize,
}

impl Default for InputConfig {
    fn default() -> Self {
        InputConfig {
            rgb_frames: 1,
            event_frames: 5,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub bank: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct RunConfig {
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub prompter: PrompterConfig,
    pub memory: MemoryConfig,
    pub head: HeadConfig,
    pub input: InputConfig,
    pub train: TrainConfig,
    pub paths: Paths,
}


impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config(vec!["_".into()]).validate()?;
        self.train.validate()
    }

    pub fn model_config(&self, attributes: Vec<String>) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            prompter: self.prompter.clone(),
            memory: self.memory.clone(),
            head: self.head.clone(),
            attributes,
            rgb_frames: self.input.rgb_frames,
            event_frames: self.input.event_frames,
        }
    }
}
