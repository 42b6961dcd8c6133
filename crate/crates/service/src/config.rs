//! TOML run configuration: one section per component, every field optional.

use std::path::Path;

use anyhow::Context;
use cxrseg_core::maskops::PostprocessConfig;
use cxrseg_core::workflow::{SimConfig, WorkflowConfig};
use cxrseg_core::{Arch, ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub arch: Arch,
    pub depth: usize,
    pub base_channels: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { arch: Arch::Unet, depth: 3, base_channels: 8 }
    }
}

impl ModelSection {
    pub fn config(&self) -> ModelConfig {
        ModelConfig::new(self.arch, self.depth, self.base_channels)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeSection {
    pub host: String,
    pub port: u16,
}

impl Default for ServeSection {
    fn default() -> Self {
        Self { host: "127.0.0.1".into(), port: 8080 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainConfig,
    pub postprocess: PostprocessConfig,
    pub workflow: WorkflowConfig,
    pub serve: ServeSection,
    pub sim: SimConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        cfg.train.validate()?;
        cfg.model.config().validate()?;
        Ok(cfg)
    }
}
