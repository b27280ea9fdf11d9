use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use treefield_core::topobreak::DEFAULT_MIN_NODES;

use crate::error::{PipelineError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Supervision {
    /// Repair targets from the complete tree.
    Full,
    /// Repair targets from the corrupted tree, queried around one extra synthetic break.
    Weak,
}

impl fmt::Display for Supervision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Supervision::Full => "full",
            Supervision::Weak => "weak",
        })
    }
}

impl FromStr for Supervision {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Supervision::Full),
            "weak" => Ok(Supervision::Weak),
            _ => Err(PipelineError::Config(format!("unknown supervision {s:?}"))),
        }
    }
}

/// Optimization and sampling settings. The architecture, including the
/// fusion mode, lives in [`treefield_field::Hyper`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda_bce: f64,
    pub lambda_dice: f64,
    pub supervision: Supervision,
    /// Surface points per tree.
    pub n_s: usize,
    /// Skeleton points per tree.
    pub n_k: usize,
    pub q_r: usize,
    pub q_l: usize,
    pub q_s: usize,
    /// Share of repair queries drawn near the break.
    pub p: f64,
    /// Branch path length below which TopoBreak leaves a branch alone.
    pub min_nodes: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn paper() -> Self {
        TrainConfig {
            epochs: 15,
            batch_size: 16,
            learning_rate: 1e-4,
            lambda_bce: 0.5,
            lambda_dice: 0.5,
            supervision: Supervision::Full,
            n_s: 25_000,
            n_k: 6_000,
            q_r: 6_000,
            q_l: 6_000,
            q_s: 6_000,
            p: 0.8,
            min_nodes: DEFAULT_MIN_NODES,
            seed: 0,
        }
    }

    /// 64³ trees, 40 training cases. Fewer cases than the full-size setting,
    /// so smaller batches and a larger step keep the update count useful.
    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 2,
            learning_rate: 1e-3,
            n_s: 2048,
            n_k: 512,
            q_r: 1024,
            q_l: 1024,
            q_s: 1024,
            ..Self::paper()
        }
    }

    pub fn with_supervision(mut self, supervision: Supervision) -> Self {
        self.supervision = supervision;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("n_s", self.n_s),
            ("n_k", self.n_k),
            ("q_r", self.q_r),
            ("q_l", self.q_l),
            ("q_s", self.q_s),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(PipelineError::Config(format!("{name} must be positive")));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(PipelineError::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if !(self.p > 0.0 && self.p < 1.0) {
            return Err(PipelineError::Config(format!("p {} outside (0, 1)", self.p)));
        }
        if self.lambda_bce < 0.0 || self.lambda_dice < 0.0 {
            return Err(PipelineError::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}
