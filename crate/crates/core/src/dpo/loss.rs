//! DPO and cross-entropy objectives with analytic gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pset::ParameterSet;

use super::policy::{log_softmax, ToyPolicy};

/// Features plus chosen / rejected response indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub x: Vec<f64>,
    pub chosen: usize,
    pub rejected: usize,
}

/// A labelled classification example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub x: Vec<f64>,
    pub y: usize,
}

/// `-log σ(z)` without overflow.
pub fn neg_log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidBeta(beta))
    }
}

fn check_pair(policy: &ToyPolicy, pair: &PreferencePair) -> Result<()> {
    policy.check_response(pair.chosen)?;
    policy.check_response(pair.rejected)?;
    if pair.chosen == pair.rejected {
        return Err(Error::InvalidConfig(format!(
            "preference pair chooses and rejects response {}",
            pair.chosen
        )));
    }
    if pair.x.len() != policy.shape().input_dim {
        return Err(Error::MisalignedSets(format!(
            "feature length {} for input dim {}",
            pair.x.len(),
            policy.shape().input_dim
        )));
    }
    Ok(())
}

/// `β·[(log π(y_w|x) - log π_ref(y_w|x)) - (log π(y_l|x) - log π_ref(y_l|x))]`.
pub fn implicit_margin(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    pair: &PreferencePair,
    beta: f64,
) -> f64 {
    let lp = policy.log_probs(&pair.x);
    let lr = reference.log_probs(&pair.x);
    beta * ((lp[pair.chosen] - lr[pair.chosen]) - (lp[pair.rejected] - lr[pair.rejected]))
}

/// Mean DPO loss and the per-pair margins. An empty batch has loss 0.
pub fn dpo_loss(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    batch: &[PreferencePair],
    beta: f64,
) -> Result<(f64, Vec<f64>)> {
    check_beta(beta)?;
    let mut margins = Vec::with_capacity(batch.len());
    for pair in batch {
        check_pair(policy, pair)?;
        margins.push(implicit_margin(policy, reference, pair, beta));
    }
    if batch.is_empty() {
        return Ok((0.0, margins));
    }
    let loss = margins.iter().map(|&z| neg_log_sigmoid(z)).sum::<f64>() / batch.len() as f64;
    Ok((loss, margins))
}

/// Loss, margins and the gradient w.r.t. the policy parameters.
///
/// With `z` the margin, `∂(-log σ(z))/∂logits = -σ(-z)·β·(e_w - e_l)`: the
/// softmax normalizer cancels between the chosen and rejected terms. The
/// reference model receives no gradient. Pairs are reduced in index order.
pub fn dpo_loss_and_grad(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    batch: &[PreferencePair],
    beta: f64,
) -> Result<(f64, Vec<f64>, ParameterSet)> {
    check_beta(beta)?;
    let mut grad = policy.params().zeros_like();
    if batch.is_empty() {
        return Ok((0.0, Vec::new(), grad));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut margins = Vec::with_capacity(batch.len());
    let mut dlogits = vec![0.0; policy.shape().num_responses];
    for pair in batch {
        check_pair(policy, pair)?;
        let fwd = policy.forward(&pair.x);
        let lp = log_softmax(&fwd.logits);
        let lr = reference.log_probs(&pair.x);
        let (w, l) = (pair.chosen, pair.rejected);
        let z = beta * ((lp[w] - lr[w]) - (lp[l] - lr[l]));
        loss += neg_log_sigmoid(z);
        margins.push(z);
        let coeff = -sigmoid(-z) * beta * scale;
        dlogits.iter_mut().for_each(|d| *d = 0.0);
        dlogits[w] = coeff;
        dlogits[l] = -coeff;
        policy.backward(&pair.x, &fwd, &dlogits, &mut grad);
    }
    Ok((loss * scale, margins, grad))
}

pub fn dpo_grad(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    batch: &[PreferencePair],
    beta: f64,
) -> Result<ParameterSet> {
    dpo_loss_and_grad(policy, reference, batch, beta).map(|(_, _, g)| g)
}

/// Mean cross-entropy of the labels and its gradient.
pub fn cross_entropy_and_grad(
    policy: &ToyPolicy,
    batch: &[Example],
) -> Result<(f64, ParameterSet)> {
    let mut grad = policy.params().zeros_like();
    if batch.is_empty() {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for ex in batch {
        policy.check_response(ex.y)?;
        let fwd = policy.forward(&ex.x);
        let lp = log_softmax(&fwd.logits);
        loss -= lp[ex.y];
        let dlogits: Vec<f64> = lp
            .iter()
            .enumerate()
            .map(|(c, l)| scale * (l.exp() - if c == ex.y { 1.0 } else { 0.0 }))
            .collect();
        policy.backward(&ex.x, &fwd, &dlogits, &mut grad);
    }
    Ok((loss * scale, grad))
}
