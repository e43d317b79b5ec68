use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pset::ParameterSet;

use super::OptimizerState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Added to the second moment inside the square root.
    pub epsilon: f64,
    /// Folded into the update itself, so merging sees the whole parameter change.
    pub weight_decay: f64,
    pub bias_correction: bool,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            learning_rate: 5e-7,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
            bias_correction: true,
        }
    }
}

impl AdamHyper {
    /// The literal pseudo-code variant: no bias correction, no weight decay.
    pub fn alg1(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            bias_correction: false,
            ..Self::default()
        }
    }

    pub fn with_learning_rate(mut self, lr: f64) -> Self {
        self.learning_rate = lr;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| Err(Error::InvalidConfig(format!("{what} = {v}")));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning_rate", self.learning_rate);
        }
        for (what, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(what, b);
            }
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return bad("epsilon", self.epsilon);
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay", self.weight_decay);
        }
        Ok(())
    }
}

/// Updates the moments of tensor `index` in place and returns
/// `Δθ = -η·(m̂/√(v̂+ε) + λ·θ)`.
///
/// `state.t()` must already count the current step.
pub fn adam_delta(
    state: &mut OptimizerState,
    index: usize,
    grad: &[f64],
    param: &[f64],
    hyper: &AdamHyper,
) -> Result<Vec<f64>> {
    let name = state.name(index).to_string();
    if grad.len() != state.m.data(index).len() || param.len() != grad.len() {
        return Err(Error::MisalignedSets(format!(
            "gradient for '{name}' has {} elements, state has {}",
            grad.len(),
            state.m.data(index).len()
        )));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient(name));
    }
    let t = state.t.min(i32::MAX as u64) as i32;
    let (c1, c2) = if hyper.bias_correction {
        (1.0 - hyper.beta1.powi(t), 1.0 - hyper.beta2.powi(t))
    } else {
        (1.0, 1.0)
    };
    let (b1, b2, eta, eps, wd) = (
        hyper.beta1,
        hyper.beta2,
        hyper.learning_rate,
        hyper.epsilon,
        hyper.weight_decay,
    );
    let m = state.m.data_mut(index);
    for (mi, &g) in m.iter_mut().zip(grad) {
        *mi = b1 * *mi + (1.0 - b1) * g;
    }
    let v = state.v.data_mut(index);
    for (vi, &g) in v.iter_mut().zip(grad) {
        *vi = b2 * *vi + (1.0 - b2) * g * g;
    }
    let (m, v) = (state.m.data(index), state.v.data(index));
    Ok(m.iter()
        .zip(v)
        .zip(param)
        .map(|((&mi, &vi), &p)| {
            let step = (mi / c1) / (vi / c2 + eps).sqrt();
            if wd > 0.0 {
                -eta * (step + wd * p)
            } else {
                -eta * step
            }
        })
        .collect())
}

/// Plain Adam: `θ ← θ + Δθ`.
pub fn adam_step(
    params: &mut ParameterSet,
    grads: &ParameterSet,
    state: &mut OptimizerState,
    hyper: &AdamHyper,
) -> Result<()> {
    state.begin_step(params, grads)?;
    for i in 0..params.len() {
        let d = adam_delta(state, i, grads.data(i), params.data(i), hyper)?;
        for (p, d) in params.data_mut(i).iter_mut().zip(d) {
            *p += d;
        }
    }
    Ok(())
}
