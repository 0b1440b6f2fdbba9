use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::scene::DataConfig;
use crate::error::{CsdnError, Result};
use crate::head::{HeadConfig, Topology, ABLATION_TOPOLOGIES};
use crate::training::{AdamW, LossWeights, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    /// Model initialization and data order.
    pub seed: u64,
    /// Scene generation; kept separate so that model seeds can vary over a
    /// fixed benchmark.
    pub data_seed: u64,
    pub output_dir: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 0,
            data_seed: 0,
            output_dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub topologies: Vec<String>,
    pub seeds: Vec<u64>,
    /// Every topology's parameter count must lie within this relative
    /// distance of the reference topology's.
    pub param_tolerance: f64,
    /// Topology whose parameter count the others are matched to.
    pub reference: String,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            topologies: ABLATION_TOPOLOGIES.iter().map(|s| s.to_string()).collect(),
            seeds: vec![0, 1, 2, 3, 4],
            param_tolerance: 0.05,
            reference: "n+b+d".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub layers: Vec<usize>,
    /// Held-out mAP50 a depth must reach to count as converged.
    pub min_map50: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            layers: vec![2, 4, 6],
            min_map50: 0.5,
        }
    }
}

/// Everything a run depends on. Its canonical text (see [`RunConfig::to_text`])
/// is embedded in checkpoints and report headers.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub head: HeadConfig,
    pub train: TrainConfig,
    pub optimizer: AdamW,
    pub loss: LossWeights,
    pub data: DataConfig,
    pub ablation: AblationConfig,
    pub sweep: SweepConfig,
}

impl RunConfig {
    /// Parses and validates; unknown keys are errors.
    pub fn from_text(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CsdnError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text).map_err(|e| match e {
            CsdnError::Config(m) => CsdnError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Canonical form: every field spelled out, fixed section and key order.
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn validate(&self) -> Result<()> {
        self.head.validate()?;
        self.train.validate()?;
        self.optimizer.validate()?;
        self.loss.validate()?;
        self.data.validate()?;
        if self.head.num_levels != self.data.strides.len() {
            return Err(CsdnError::Config(format!(
                "head.num_levels {} but data has {} pyramid levels",
                self.head.num_levels,
                self.data.strides.len()
            )));
        }
        if self.head.num_queries < self.data.max_objects {
            return Err(CsdnError::Config(format!(
                "num_queries {} cannot cover up to {} objects",
                self.head.num_queries, self.data.max_objects
            )));
        }
        for t in self.ablation.topologies.iter().chain([&self.ablation.reference]) {
            t.parse::<Topology>()?;
        }
        if self.ablation.seeds.is_empty() || self.sweep.layers.is_empty() {
            return Err(CsdnError::Config(
                "ablation.seeds and sweep.layers must be non-empty".into(),
            ));
        }
        if self.ablation.param_tolerance.is_nan() || self.ablation.param_tolerance < 0.0 {
            return Err(CsdnError::Config(
                "ablation.param_tolerance must be non-negative".into(),
            ));
        }
        Ok(())
    }
}
