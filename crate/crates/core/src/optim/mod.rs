//! Adam base optimizer and the online merging variants built on top of it.
//!
//! Every variant shares the same moment update ([`adam_delta`]); they differ
//! only in how the resulting update `Δθ` is post-processed before it is added
//! to the parameters:
//!
//! ```text
//! OnDARE:  θ ← θ + (1-α)·F_rand(Δθ) + α·F_rand(τ_r)
//! OnTIES:  θ ← θ + (1-α)·F_top(Δθ) ⊕sign α·F_top(τ_r)
//! full:    θ ← θ_b + (1-α)·F_rand(θ - θ_b + Δθ) + α·F_rand(τ_r)
//! step-K:  accumulate Δθ for K-1 steps, then roll back and merge the sum
//! ```
//!
//! `τ_r = θ_r - θ_b` is cached once at construction; `θ_b` itself is never
//! kept in [`OptimizerState`].

mod adam;
mod online;
mod state;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use adam::{adam_delta, adam_step, AdamHyper};
pub use online::{
    childtuning_step, ema_update, full_merge_step, ondare_step, onties_step, stepk_step,
};
pub use state::{OptimizerState, StateSidecar};

use crate::error::{Error, Result};
use crate::kernels::check_probability;
use crate::pset::{DeltaSet, ParameterSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeVariant {
    None,
    OnDare,
    OnTies,
    FullMerge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OnlineMergeConfig {
    pub variant: MergeVariant,
    /// Merge weight of the reference delta.
    pub alpha: f64,
    /// Reserve rate of both sparsifiers.
    pub reserve_rate: f64,
    /// Steps between merges (1 = fully online).
    pub gap_step: u64,
    /// Pretrained weights, needed only by [`MergeVariant::FullMerge`].
    #[serde(skip)]
    pub base_for_full_merge: Option<ParameterSet>,
}

impl Default for OnlineMergeConfig {
    fn default() -> Self {
        Self {
            variant: MergeVariant::OnDare,
            alpha: 1e-6,
            reserve_rate: 0.5,
            gap_step: 1,
            base_for_full_merge: None,
        }
    }
}

impl OnlineMergeConfig {
    pub fn new(variant: MergeVariant, alpha: f64, reserve_rate: f64) -> Self {
        Self {
            variant,
            alpha,
            reserve_rate,
            ..Self::default()
        }
    }

    pub fn with_gap_step(mut self, k: u64) -> Self {
        self.gap_step = k;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidConfig(format!(
                "merge weight alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        check_probability(self.reserve_rate)?;
        if self.gap_step == 0 {
            return Err(Error::InvalidConfig("gap step must be at least 1".into()));
        }
        Ok(())
    }
}

/// Which update rule an [`Optimizer`] applies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    /// Task-free ChildTuning: Bernoulli gradient mask rescaled by `1/p`.
    ChildTuning {
        reserve_rate: f64,
    },
    /// Merge every step (`variant` None behaves as plain Adam).
    Online(OnlineMergeConfig),
    /// Merge every `gap_step` steps.
    StepK(OnlineMergeConfig),
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OptimizerKind::Adam => f.write_str("adam"),
            OptimizerKind::ChildTuning { .. } => f.write_str("childtuning"),
            OptimizerKind::Online(c) => write!(f, "{:?}", c.variant),
            OptimizerKind::StepK(c) => write!(f, "stepk-{:?}", c.variant),
        }
    }
}

/// Optimizer names accepted in run configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerName {
    Adam,
    Adamw,
    Ondare,
    Onties,
    Fullmerge,
    StepkOndare,
    StepkOnties,
    Childtuning,
}

impl FromStr for OptimizerName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::InvalidConfig(format!("unknown optimizer '{s}'")))
    }
}

impl OptimizerName {
    /// Builds the concrete kind from the shared merge settings.
    pub fn into_kind(self, merge: &OnlineMergeConfig) -> Result<OptimizerKind> {
        let with = |variant| OnlineMergeConfig {
            variant,
            ..merge.clone()
        };
        let online = |variant| -> Result<OptimizerKind> {
            if merge.gap_step != 1 {
                return Err(Error::InvalidConfig(
                    "gap_step > 1 needs a stepk-* optimizer".into(),
                ));
            }
            Ok(OptimizerKind::Online(with(variant)))
        };
        match self {
            OptimizerName::Adam | OptimizerName::Adamw => Ok(OptimizerKind::Adam),
            OptimizerName::Ondare => online(MergeVariant::OnDare),
            OptimizerName::Onties => online(MergeVariant::OnTies),
            OptimizerName::Fullmerge => online(MergeVariant::FullMerge),
            OptimizerName::StepkOndare => Ok(OptimizerKind::StepK(with(MergeVariant::OnDare))),
            OptimizerName::StepkOnties => Ok(OptimizerKind::StepK(with(MergeVariant::OnTies))),
            OptimizerName::Childtuning => Ok(OptimizerKind::ChildTuning {
                reserve_rate: merge.reserve_rate,
            }),
        }
    }
}

/// An optimizer instance: update rule, hyper-parameters, state and an
/// optional EMA of the weights.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    hyper: AdamHyper,
    ema_coefficient: Option<f64>,
    state: OptimizerState,
}

impl Optimizer {
    /// `reference_delta` is `θ_r - θ_b`; required by every merging kind.
    pub fn new(
        kind: OptimizerKind,
        hyper: AdamHyper,
        params: &ParameterSet,
        reference_delta: Option<DeltaSet>,
        seed: u64,
        ema_coefficient: Option<f64>,
    ) -> Result<Self> {
        hyper.validate()?;
        match &kind {
            OptimizerKind::Adam => {}
            OptimizerKind::ChildTuning { reserve_rate } => check_probability(*reserve_rate)?,
            OptimizerKind::Online(cfg) => {
                cfg.validate()?;
                if cfg.variant == MergeVariant::FullMerge {
                    let base = cfg
                        .base_for_full_merge
                        .as_ref()
                        .ok_or(Error::MissingBaseModel)?;
                    base.check_aligned(params)?;
                }
            }
            OptimizerKind::StepK(cfg) => {
                cfg.validate()?;
                if !matches!(cfg.variant, MergeVariant::OnDare | MergeVariant::OnTies) {
                    return Err(Error::InvalidConfig(
                        "step-K merging supports OnDARE and OnTIES only".into(),
                    ));
                }
            }
        }
        let needs_reference = match &kind {
            OptimizerKind::Online(c) => c.variant != MergeVariant::None,
            OptimizerKind::StepK(_) => true,
            _ => false,
        };
        if needs_reference && reference_delta.is_none() {
            return Err(Error::MissingReferenceDelta);
        }
        if let Some(c) = ema_coefficient {
            if !(c > 0.0 && c < 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "EMA coefficient {c} outside (0, 1)"
                )));
            }
        }
        let mut state = OptimizerState::new(params, reference_delta, seed)?;
        if ema_coefficient.is_some() {
            state.init_ema(params);
        }
        Ok(Self {
            kind,
            hyper,
            ema_coefficient,
            state,
        })
    }

    pub fn kind(&self) -> &OptimizerKind {
        &self.kind
    }

    pub fn hyper(&self) -> &AdamHyper {
        &self.hyper
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    pub fn ema_coefficient(&self) -> Option<f64> {
        self.ema_coefficient
    }

    pub fn step(&mut self, params: &mut ParameterSet, grads: &ParameterSet) -> Result<()> {
        let (hyper, state) = (&self.hyper, &mut self.state);
        match &self.kind {
            OptimizerKind::Adam => adam_step(params, grads, state, hyper)?,
            OptimizerKind::ChildTuning { reserve_rate } => {
                childtuning_step(params, grads, state, hyper, *reserve_rate)?
            }
            OptimizerKind::Online(cfg) => match cfg.variant {
                MergeVariant::None => adam_step(params, grads, state, hyper)?,
                MergeVariant::OnDare => ondare_step(params, grads, state, hyper, cfg)?,
                MergeVariant::OnTies => onties_step(params, grads, state, hyper, cfg)?,
                MergeVariant::FullMerge => full_merge_step(params, grads, state, hyper, cfg)?,
            },
            OptimizerKind::StepK(cfg) => stepk_step(params, grads, state, hyper, cfg)?,
        }
        if let Some(c) = self.ema_coefficient {
            ema_update(state, params, c);
        }
        Ok(())
    }

    /// Weights used for evaluation and export: the EMA shadow when enabled.
    pub fn export_params<'a>(&'a self, params: &'a ParameterSet) -> &'a ParameterSet {
        self.state.ema_shadow().unwrap_or(params)
    }

    pub fn sidecar(&self) -> StateSidecar {
        StateSidecar {
            t: self.state.t(),
            seed: self.state.seed(),
            tau_base_fingerprint: self
                .state
                .tau_ref()
                .map(|d| d.base_fingerprint().to_string()),
            hyper: self.hyper.clone(),
            kind: self.kind.clone(),
            ema_coefficient: self.ema_coefficient,
        }
    }

    /// Writes the tensor state as PSET1 to `path` and the scalars as JSON to
    /// `path` with a `.json` extension appended.
    pub fn save_state(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        state::save(self, path.as_ref())
    }

    /// Restores an optimizer saved with [`Optimizer::save_state`]. A
    /// full-merge base is not part of the state and must be re-attached.
    pub fn load_state(
        path: impl AsRef<std::path::Path>,
        base_for_full_merge: Option<ParameterSet>,
    ) -> Result<Self> {
        let (sidecar, mut st) = state::load(path.as_ref())?;
        let mut kind = sidecar.kind;
        if let OptimizerKind::Online(cfg) = &mut kind {
            cfg.base_for_full_merge = base_for_full_merge;
        }
        st.set_t(sidecar.t);
        Ok(Self {
            kind,
            hyper: sidecar.hyper,
            ema_coefficient: sidecar.ema_coefficient,
            state: st,
        })
    }
}

#[cfg(test)]
mod tests;
