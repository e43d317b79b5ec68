//! JSON run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dpo::{DpoConfig, PhaseConfig, SuiteConfig, TrainSpec};
use crate::error::{Error, Result};
use crate::optim::{AdamHyper, MergeVariant, OnlineMergeConfig, OptimizerKind, OptimizerName};

/// Online-merging knobs shared by every merging optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MergeSettings {
    pub alpha: f64,
    pub reserve_rate: f64,
    pub gap_step: u64,
}

impl Default for MergeSettings {
    fn default() -> Self {
        let d = OnlineMergeConfig::default();
        Self {
            alpha: d.alpha,
            reserve_rate: d.reserve_rate,
            gap_step: d.gap_step,
        }
    }
}

impl MergeSettings {
    pub fn online_config(&self) -> OnlineMergeConfig {
        OnlineMergeConfig {
            variant: MergeVariant::OnDare,
            alpha: self.alpha,
            reserve_rate: self.reserve_rate,
            gap_step: self.gap_step,
            base_for_full_merge: None,
        }
    }
}

fn default_dpo_hyper() -> AdamHyper {
    AdamHyper::default().with_learning_rate(DEFAULT_DPO_LEARNING_RATE)
}

fn default_hidden_dim() -> usize {
    16
}

fn default_optimizer() -> OptimizerName {
    OptimizerName::Adamw
}

/// DPO learning rate used when a config does not set `adam.learning_rate`.
pub const DEFAULT_DPO_LEARNING_RATE: f64 = 3e-2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds the task suite, the initial weights, batching and masks.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerName,
    /// Where `train` writes its run directory unless `--out` is given.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub ema_coefficient: Option<f64>,
    /// Adam settings for the DPO phase.
    #[serde(default = "default_dpo_hyper")]
    pub adam: AdamHyper,
    #[serde(default)]
    pub merge: MergeSettings,
    #[serde(default)]
    pub dpo: DpoConfig,
    /// Suite sizes and geometry; its `seed` is replaced by the run seed.
    #[serde(default)]
    pub suite: SuiteConfig,
    #[serde(default)]
    pub pretrain: PhaseConfig,
    #[serde(default)]
    pub sft: PhaseConfig,
    #[serde(default = "default_hidden_dim")]
    pub hidden_dim: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| Error::InvalidConfig(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        self.merge.online_config().validate()?;
        self.dpo.validate()?;
        self.suite_config().validate()?;
        if self.hidden_dim == 0 {
            return Err(Error::InvalidConfig("hidden_dim must be positive".into()));
        }
        if let Some(c) = self.ema_coefficient {
            if !(c > 0.0 && c < 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "ema_coefficient {c} outside (0, 1)"
                )));
            }
        }
        self.optimizer_kind().map(|_| ())
    }

    pub fn suite_config(&self) -> SuiteConfig {
        SuiteConfig {
            seed: self.seed,
            ..self.suite.clone()
        }
    }

    pub fn optimizer_kind(&self) -> Result<OptimizerKind> {
        self.optimizer.into_kind(&self.merge.online_config())
    }

    pub fn train_spec(&self) -> Result<TrainSpec> {
        Ok(TrainSpec {
            kind: self.optimizer_kind()?,
            hyper: self.adam.clone(),
            ema_coefficient: self.ema_coefficient,
            dpo: self.dpo.clone(),
            seed: self.seed,
        })
    }
}
