use std::path::Path;

use anyhow::{Context, Result};
use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use treefield_core::TreeSpec;
use treefield_field::Hyper;
use treefield_pipeline::TrainConfig;

pub const DESK_TOML: &str = include_str!("../configs/desk.toml");
pub const PAPER_TOML: &str = include_str!("../configs/paper.toml");

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Desk,
    Paper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub synth: TreeSpec,
    pub model: Hyper,
    pub train: TrainConfig,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| anyhow::anyhow!("{}", e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn preset(p: Preset) -> Self {
        let text = match p {
            Preset::Desk => DESK_TOML,
            Preset::Paper => PAPER_TOML,
        };
        Self::parse(text).expect("shipped presets parse")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("config {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.synth.class_count as usize != self.model.label_classes {
            anyhow::bail!("synth.class_count {} differs from model.label_classes {}", self.synth.class_count, self.model.label_classes);
        }
        if self.synth.segment_count as usize != self.model.segment_classes {
            anyhow::bail!(
                "synth.segment_count {} differs from model.segment_classes {}",
                self.synth.segment_count,
                self.model.segment_classes
            );
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.synth.seed = s;
            self.train.seed = s;
        }
        self
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
