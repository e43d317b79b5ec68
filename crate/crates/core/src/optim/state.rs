use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::error::{Error, Result};
use crate::pset::{DeltaSet, ParameterSet, Tensor};

use super::{AdamHyper, Optimizer, OptimizerKind};

const M: &str = "__m.";
const V: &str = "__v.";
const DC: &str = "__dc.";
const TAU: &str = "__tau.";
const EMA: &str = "__ema.";

/// Per-tensor moments, step counter and cached deltas.
///
/// Holds `τ_r` but never the pretrained weights themselves.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub(crate) m: ParameterSet,
    pub(crate) v: ParameterSet,
    pub(crate) t: u64,
    pub(crate) tau_ref: Option<DeltaSet>,
    pub(crate) delta_cache: Option<ParameterSet>,
    pub(crate) ema_shadow: Option<ParameterSet>,
    pub(crate) seed: u64,
}

impl OptimizerState {
    pub fn new(params: &ParameterSet, tau_ref: Option<DeltaSet>, seed: u64) -> Result<Self> {
        if let Some(tau) = &tau_ref {
            tau.values().check_aligned(params)?;
        }
        Ok(Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
            tau_ref,
            delta_cache: None,
            ema_shadow: None,
            seed,
        })
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub(crate) fn set_t(&mut self, t: u64) {
        self.t = t;
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn m(&self) -> &ParameterSet {
        &self.m
    }

    pub fn v(&self) -> &ParameterSet {
        &self.v
    }

    pub fn tau_ref(&self) -> Option<&DeltaSet> {
        self.tau_ref.as_ref()
    }

    pub fn delta_cache(&self) -> Option<&ParameterSet> {
        self.delta_cache.as_ref()
    }

    pub fn ema_shadow(&self) -> Option<&ParameterSet> {
        self.ema_shadow.as_ref()
    }

    pub(crate) fn name(&self, index: usize) -> &str {
        &self.m.tensors()[index].name
    }

    pub(crate) fn init_ema(&mut self, params: &ParameterSet) {
        self.ema_shadow = Some(params.clone());
    }

    pub(crate) fn tau(&self) -> Result<&ParameterSet> {
        self.tau_ref
            .as_ref()
            .map(DeltaSet::values)
            .ok_or(Error::MissingReferenceDelta)
    }

    /// Validates the step's inputs, then advances `t`. Nothing is mutated
    /// if the gradients are misaligned or non-finite.
    pub(crate) fn begin_step(&mut self, params: &ParameterSet, grads: &ParameterSet) -> Result<()> {
        params.check_aligned(&self.m)?;
        grads.check_aligned(&self.m)?;
        if let Some(t) = grads
            .tensors()
            .iter()
            .find(|t| t.data.iter().any(|g| !g.is_finite()))
        {
            return Err(Error::NonFiniteGradient(t.name.clone()));
        }
        self.t += 1;
        Ok(())
    }

    /// All tensor state flattened into one set with reserved name prefixes.
    pub fn to_parameter_set(&self) -> ParameterSet {
        let mut out: Vec<Tensor> = Vec::new();
        let mut push = |prefix: &str, set: &ParameterSet| {
            out.extend(set.tensors().iter().map(|t| Tensor {
                name: format!("{prefix}{}", t.name),
                shape: t.shape.clone(),
                data: t.data.clone(),
            }))
        };
        push(M, &self.m);
        push(V, &self.v);
        if let Some(dc) = &self.delta_cache {
            push(DC, dc);
        }
        if let Some(tau) = &self.tau_ref {
            push(TAU, tau.values());
        }
        if let Some(ema) = &self.ema_shadow {
            push(EMA, ema);
        }
        ParameterSet::new(out).expect("prefixed names stay unique")
    }

    fn from_parameter_set(
        set: ParameterSet,
        t: u64,
        seed: u64,
        tau_base_fingerprint: Option<String>,
    ) -> Result<Self> {
        let take = |prefix: &str| -> Result<Option<ParameterSet>> {
            let tensors: Vec<Tensor> = set
                .tensors()
                .iter()
                .filter_map(|t| {
                    t.name.strip_prefix(prefix).map(|n| Tensor {
                        name: n.to_string(),
                        shape: t.shape.clone(),
                        data: t.data.clone(),
                    })
                })
                .collect();
            if tensors.is_empty() {
                Ok(None)
            } else {
                ParameterSet::new(tensors).map(Some)
            }
        };
        let m = take(M)?.unwrap_or_default();
        let v = take(V)?.unwrap_or_default();
        m.check_aligned(&v)?;
        let delta_cache = take(DC)?;
        let tau_ref = match (take(TAU)?, tau_base_fingerprint) {
            (Some(tau), Some(fp)) => Some(DeltaSet::from_parts(tau, fp)),
            (None, None) => None,
            _ => {
                return Err(Error::Format(
                    "reference delta and its fingerprint must be saved together".into(),
                ))
            }
        };
        let ema_shadow = take(EMA)?;
        for other in [&delta_cache, &ema_shadow].into_iter().flatten() {
            other.check_aligned(&m)?;
        }
        if let Some(tau) = &tau_ref {
            tau.values().check_aligned(&m)?;
        }
        Ok(Self {
            m,
            v,
            t,
            tau_ref,
            delta_cache,
            ema_shadow,
            seed,
        })
    }
}

/// Scalar part of a saved optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateSidecar {
    pub t: u64,
    pub seed: u64,
    pub tau_base_fingerprint: Option<String>,
    pub hyper: AdamHyper,
    pub kind: OptimizerKind,
    pub ema_coefficient: Option<f64>,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub(super) fn save(opt: &Optimizer, path: &Path) -> Result<()> {
    save_checkpoint(&opt.state.to_parameter_set(), path)?;
    let side = sidecar_path(path);
    let json = serde_json::to_vec_pretty(&opt.sidecar()).expect("sidecar serializes");
    fs::write(&side, json).map_err(|e| Error::io(side, e))
}

pub(super) fn load(path: &Path) -> Result<(StateSidecar, OptimizerState)> {
    let set = load_checkpoint(path)?;
    let side = sidecar_path(path);
    let bytes = fs::read(&side).map_err(|e| Error::io(&side, e))?;
    let sidecar: StateSidecar = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Format(format!("optimizer sidecar: {e}")))?;
    let state = OptimizerState::from_parameter_set(
        set,
        sidecar.t,
        sidecar.seed,
        sidecar.tau_base_fingerprint.clone(),
    )?;
    Ok((sidecar, state))
}
