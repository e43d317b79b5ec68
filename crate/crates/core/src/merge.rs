//! Offline task-arithmetic merging: Linear, DARE and TIES.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{check_probability, linear_combine, sparsify_random, sparsify_top_p};
use crate::mask::{stream, MaskKey};
use crate::pset::{delta, ParameterSet, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeMethod {
    Linear,
    Dare,
    Ties,
}

impl fmt::Display for MergeMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MergeMethod::Linear => "linear",
            MergeMethod::Dare => "dare",
            MergeMethod::Ties => "ties",
        })
    }
}

impl FromStr for MergeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linear" => Ok(MergeMethod::Linear),
            "dare" => Ok(MergeMethod::Dare),
            "ties" => Ok(MergeMethod::Ties),
            other => Err(Error::InvalidConfig(format!(
                "unknown merge method '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeSpec {
    pub method: MergeMethod,
    /// Reserve rate `p` in `(0, 1]`.
    pub reserve_rate: f64,
    /// One nonnegative weight per merged model.
    pub weights: Vec<f64>,
    pub rescale: bool,
    pub seed: u64,
}

impl MergeSpec {
    pub fn validate(&self, num_models: usize) -> Result<()> {
        check_probability(self.reserve_rate)?;
        if num_models == 0 {
            return Err(Error::InvalidConfig(
                "offline merge needs at least one model".into(),
            ));
        }
        if self.weights.len() != num_models {
            return Err(Error::InvalidConfig(format!(
                "{} weights for {num_models} models",
                self.weights.len()
            )));
        }
        if let Some(w) = self.weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::InvalidConfig(format!("invalid merge weight {w}")));
        }
        Ok(())
    }
}

/// Merges `models` into `base` by combining their deltas `model_i - base`.
/// Inputs are never modified.
pub fn offline_merge(
    base: &ParameterSet,
    models: &[ParameterSet],
    spec: &MergeSpec,
) -> Result<ParameterSet> {
    spec.validate(models.len())?;
    let deltas = models
        .iter()
        .map(|m| delta(m, base).map(|d| d.into_values()))
        .collect::<Result<Vec<_>>>()?;

    let tensors = base
        .tensors()
        .iter()
        .enumerate()
        .map(|(ti, bt)| {
            let taus: Vec<&[f64]> = deltas.iter().map(|d| d.data(ti)).collect();
            let merged = match spec.method {
                MergeMethod::Linear => linear_delta(&taus, &spec.weights)?,
                MergeMethod::Dare => dare_delta(&bt.name, &taus, spec)?,
                MergeMethod::Ties => ties_delta(&taus, spec)?,
            };
            let data = bt.data.iter().zip(&merged).map(|(b, t)| b + t).collect();
            Tensor::new(bt.name.clone(), bt.shape.clone(), data)
        })
        .collect::<Result<Vec<_>>>()?;
    ParameterSet::new(tensors)
}

fn linear_delta(taus: &[&[f64]], weights: &[f64]) -> Result<Vec<f64>> {
    let terms: Vec<(f64, &[f64])> = weights.iter().copied().zip(taus.iter().copied()).collect();
    linear_combine(&terms)
}

fn dare_delta(name: &str, taus: &[&[f64]], spec: &MergeSpec) -> Result<Vec<f64>> {
    let sparse = taus
        .iter()
        .enumerate()
        .map(|(i, tau)| {
            let key = MaskKey::new(spec.seed, name, 0, stream::OFFLINE + i as u64);
            sparsify_random(tau, spec.reserve_rate, &key, spec.rescale)
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&[f64]> = sparse.iter().map(Vec::as_slice).collect();
    linear_delta(&refs, &spec.weights)
}

/// Trim (top-p per model), elect the sign of the weighted trimmed mass, then
/// average the agreeing survivors by their weights.
fn ties_delta(taus: &[&[f64]], spec: &MergeSpec) -> Result<Vec<f64>> {
    let trimmed = taus
        .iter()
        .map(|tau| sparsify_top_p(tau, spec.reserve_rate))
        .collect::<Result<Vec<_>>>()?;
    let n = taus.first().map_or(0, |t| t.len());
    let mut out = vec![0.0; n];
    for (j, o) in out.iter_mut().enumerate() {
        let mass: f64 = trimmed
            .iter()
            .zip(&spec.weights)
            .map(|(t, w)| w * t[j])
            .sum();
        if mass == 0.0 {
            continue;
        }
        let elected = mass > 0.0;
        let (mut num, mut den) = (0.0, 0.0);
        for (t, w) in trimmed.iter().zip(&spec.weights) {
            let v = t[j];
            if v != 0.0 && (v > 0.0) == elected {
                num += w * v;
                den += w;
            }
        }
        if den > 0.0 {
            *o = num / den;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, v: &[f64]) -> ParameterSet {
        ParameterSet::new(vec![Tensor::new(name, vec![v.len()], v.to_vec()).unwrap()]).unwrap()
    }

    fn spec(method: MergeMethod, p: f64, weights: &[f64]) -> MergeSpec {
        MergeSpec {
            method,
            reserve_rate: p,
            weights: weights.to_vec(),
            rescale: true,
            seed: 3,
        }
    }

    #[test]
    fn linear_midpoint() {
        let base = one("w", &[0.0, 0.0]);
        let models = [one("w", &[1.0, 0.0]), one("w", &[0.0, 1.0])];
        let m =
            offline_merge(&base, &models, &spec(MergeMethod::Linear, 1.0, &[0.5, 0.5])).unwrap();
        assert_eq!(m.data(0), &[0.5, 0.5]);
    }

    #[test]
    fn dare_keep_all_equals_linear() {
        let base = one("w", &[0.1, -0.7, 3.3]);
        let models = [one("w", &[0.4, 0.2, -1.0]), one("w", &[1.1, -0.3, 2.0])];
        let lin =
            offline_merge(&base, &models, &spec(MergeMethod::Linear, 1.0, &[0.3, 0.9])).unwrap();
        let dare =
            offline_merge(&base, &models, &spec(MergeMethod::Dare, 1.0, &[0.3, 0.9])).unwrap();
        assert!(lin.bit_eq(&dare));
    }

    #[test]
    fn ties_drops_minority_sign() {
        let base = one("w", &[0.0]);
        let models = [one("w", &[2.0]), one("w", &[-1.0])];
        let m = offline_merge(&base, &models, &spec(MergeMethod::Ties, 1.0, &[1.0, 1.0])).unwrap();
        assert_eq!(m.data(0), &[2.0]);
    }

    #[test]
    fn ties_averages_agreeing_survivors() {
        let base = one("w", &[1.0, 1.0]);
        let models = [one("w", &[3.0, 1.0]), one("w", &[2.0, 0.0])];
        // element 0: deltas 2 and 1 agree -> (1*2 + 3*1) / 4; element 1: 0 and -1 -> -1
        let m = offline_merge(&base, &models, &spec(MergeMethod::Ties, 1.0, &[1.0, 3.0])).unwrap();
        assert_eq!(m.data(0), &[1.0 + 5.0 / 4.0, 0.0]);
    }

    #[test]
    fn ties_trims_before_election() {
        let base = one("w", &[0.0, 0.0]);
        // p = 0.5 keeps one entry per model: model 0 keeps -4, model 1 keeps 3.
        let models = [one("w", &[1.0, -4.0]), one("w", &[3.0, -0.5])];
        let m = offline_merge(&base, &models, &spec(MergeMethod::Ties, 0.5, &[1.0, 1.0])).unwrap();
        assert_eq!(m.data(0), &[3.0, -4.0]);
    }

    #[test]
    fn validation_errors() {
        let base = one("w", &[0.0]);
        let models = [one("w", &[1.0])];
        assert!(matches!(
            offline_merge(&base, &models, &spec(MergeMethod::Dare, 0.0, &[1.0])),
            Err(Error::InvalidProbability(_))
        ));
        assert!(
            offline_merge(&base, &models, &spec(MergeMethod::Linear, 1.0, &[1.0, 1.0])).is_err()
        );
        assert!(offline_merge(&base, &[], &spec(MergeMethod::Linear, 1.0, &[])).is_err());
        assert!(matches!(
            offline_merge(
                &base,
                &[one("v", &[1.0])],
                &spec(MergeMethod::Linear, 1.0, &[1.0])
            ),
            Err(Error::MisalignedSets(_))
        ));
    }

    #[test]
    fn inputs_are_untouched() {
        let base = one("w", &[0.5, -0.5, 2.0]);
        let models = vec![one("w", &[1.0, 2.0, 3.0]), one("w", &[-1.0, 0.0, 1.0])];
        let (b0, m0) = (base.clone(), models.clone());
        for method in [MergeMethod::Linear, MergeMethod::Dare, MergeMethod::Ties] {
            offline_merge(&base, &models, &spec(method, 0.5, &[0.5, 0.5])).unwrap();
        }
        assert!(base.bit_eq(&b0));
        assert!(models.iter().zip(&m0).all(|(a, b)| a.bit_eq(b)));
    }
}
