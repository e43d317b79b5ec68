use crate::error::{Error, Result};
use crate::kernels::{
    check_probability, linear_combine, sign_consensus, sparsify_random, sparsify_top_p,
};
use crate::mask::{stream, MaskKey};
use crate::pset::ParameterSet;

use super::{adam_delta, AdamHyper, MergeVariant, OnlineMergeConfig, OptimizerState};

/// Adam deltas for every tensor; moments are updated as a side effect.
fn all_deltas(
    params: &ParameterSet,
    grads: &ParameterSet,
    state: &mut OptimizerState,
    hyper: &AdamHyper,
) -> Result<Vec<Vec<f64>>> {
    (0..params.len())
        .map(|i| adam_delta(state, i, grads.data(i), params.data(i), hyper))
        .collect()
}

/// Online merge of one tensor's update with the reference delta.
pub(crate) fn merged_update(
    variant: MergeVariant,
    update: &[f64],
    tau: &[f64],
    alpha: f64,
    reserve_rate: f64,
    key_update: &MaskKey,
    key_reference: &MaskKey,
) -> Result<Vec<f64>> {
    match variant {
        MergeVariant::OnDare => {
            let a = sparsify_random(update, reserve_rate, key_update, false)?;
            let b = sparsify_random(tau, reserve_rate, key_reference, false)?;
            linear_combine(&[(1.0 - alpha, &a), (alpha, &b)])
        }
        MergeVariant::OnTies => {
            let a = sparsify_top_p(update, reserve_rate)?;
            let b = sparsify_top_p(tau, reserve_rate)?;
            Ok(a.iter()
                .zip(&b)
                .map(|(&x, &y)| sign_consensus((1.0 - alpha) * x, alpha * y))
                .collect())
        }
        MergeVariant::None | MergeVariant::FullMerge => Err(Error::InvalidConfig(format!(
            "{variant:?} is not an online merge of the update"
        ))),
    }
}

fn keys(state: &OptimizerState, name: &str) -> (MaskKey, MaskKey) {
    (
        MaskKey::new(state.seed, name, state.t, stream::UPDATE),
        MaskKey::new(state.seed, name, state.t, stream::REFERENCE),
    )
}

fn merge_into(
    params: &mut ParameterSet,
    deltas: &[Vec<f64>],
    state: &OptimizerState,
    variant: MergeVariant,
    cfg: &OnlineMergeConfig,
) -> Result<()> {
    let tau = state.tau()?;
    for (i, d) in deltas.iter().enumerate() {
        let (ku, kr) = keys(state, state.name(i));
        let update = merged_update(
            variant,
            d,
            tau.data(i),
            cfg.alpha,
            cfg.reserve_rate,
            &ku,
            &kr,
        )?;
        for (p, u) in params.data_mut(i).iter_mut().zip(update) {
            *p += u;
        }
    }
    Ok(())
}

fn require(cfg: &OnlineMergeConfig, variant: MergeVariant) -> Result<()> {
    cfg.validate()?;
    if cfg.variant != variant {
        return Err(Error::InvalidConfig(format!(
            "expected {variant:?} config, got {:?}",
            cfg.variant
        )));
    }
    Ok(())
}

/// `θ ← θ + (1-α)·F_rand(Δθ) + α·F_rand(τ_r)`, no rescaling.
pub fn ondare_step(
    params: &mut ParameterSet,
    grads: &ParameterSet,
    state: &mut OptimizerState,
    hyper: &AdamHyper,
    cfg: &OnlineMergeConfig,
) -> Result<()> {
    require(cfg, MergeVariant::OnDare)?;
    state.tau()?;
    state.begin_step(params, grads)?;
    let deltas = all_deltas(params, grads, state, hyper)?;
    merge_into(params, &deltas, state, MergeVariant::OnDare, cfg)
}

/// `θ ← θ + (1-α)·F_top(Δθ) ⊕sign α·F_top(τ_r)`, no rescaling.
pub fn onties_step(
    params: &mut ParameterSet,
    grads: &ParameterSet,
    state: &mut OptimizerState,
    hyper: &AdamHyper,
    cfg: &OnlineMergeConfig,
) -> Result<()> {
    require(cfg, MergeVariant::OnTies)?;
    state.tau()?;
    state.begin_step(params, grads)?;
    let deltas = all_deltas(params, grads, state, hyper)?;
    merge_into(params, &deltas, state, MergeVariant::OnTies, cfg)
}

/// Unrelaxed merge against the pretrained weights:
/// `θ ← θ_b + (1-α)·F_rand(θ - θ_b + Δθ) + α·F_rand(τ_r)`.
pub fn full_merge_step(
    params: &mut ParameterSet,
    grads: &ParameterSet,
    state: &mut OptimizerState,
    hyper: &AdamHyper,
    cfg: &OnlineMergeConfig,
) -> Result<()> {
    require(cfg, MergeVariant::FullMerge)?;
    let base = cfg
        .base_for_full_merge
        .as_ref()
        .ok_or(Error::MissingBaseModel)?;
    base.check_aligned(params)?;
    state.tau()?;
    state.begin_step(params, grads)?;
    let deltas = all_deltas(params, grads, state, hyper)?;
    let tau = state.tau()?;
    for (i, d) in deltas.iter().enumerate() {
        let (ku, kr) = keys(state, state.name(i));
        let b = base.data(i);
        let drift: Vec<f64> = params
            .data(i)
            .iter()
            .zip(b)
            .zip(d)
            .map(|((p, b), d)| (p - b) + d)
            .collect();
        let update = merged_update(
            MergeVariant::OnDare,
            &drift,
            tau.data(i),
            cfg.alpha,
            cfg.reserve_rate,
            &ku,
            &kr,
        )?;
        for ((p, b), u) in params.data_mut(i).iter_mut().zip(b).zip(update) {
            *p = b + u;
        }
    }
    Ok(())
}

/// Step-K merging: updates accumulate in `Δ_c` for `K - 1` steps, then the
/// parameters are rolled back and the accumulated update is merged at once.
pub fn stepk_step(
    params: &mut ParameterSet,
    grads: &ParameterSet,
    state: &mut OptimizerState,
    hyper: &AdamHyper,
    cfg: &OnlineMergeConfig,
) -> Result<()> {
    cfg.validate()?;
    if !matches!(cfg.variant, MergeVariant::OnDare | MergeVariant::OnTies) {
        return Err(Error::InvalidConfig(format!(
            "step-K merging with {:?}",
            cfg.variant
        )));
    }
    state.tau()?;
    state.begin_step(params, grads)?;
    let mut deltas = all_deltas(params, grads, state, hyper)?;
    let mut cache = state
        .delta_cache
        .take()
        .unwrap_or_else(|| params.zeros_like());

    if state.t % cfg.gap_step != 0 {
        for (i, d) in deltas.iter().enumerate() {
            for ((c, p), &d) in cache.data_mut(i).iter_mut().zip(params.data_mut(i)).zip(d) {
                *c += d;
                *p += d;
            }
        }
        state.delta_cache = Some(cache);
        return Ok(());
    }

    for (i, d) in deltas.iter_mut().enumerate() {
        let c = cache.data_mut(i);
        for ((ci, p), di) in c.iter_mut().zip(params.data_mut(i)).zip(d.iter_mut()) {
            if *ci != 0.0 {
                *p -= *ci;
                *di += *ci;
                *ci = 0.0;
            }
        }
    }
    state.delta_cache = Some(cache);
    merge_into(params, &deltas, state, cfg.variant, cfg)
}

/// Task-free ChildTuning: the gradient is Bernoulli-masked and rescaled by
/// `1/p` before it reaches the moments.
pub fn childtuning_step(
    params: &mut ParameterSet,
    grads: &ParameterSet,
    state: &mut OptimizerState,
    hyper: &AdamHyper,
    reserve_rate: f64,
) -> Result<()> {
    check_probability(reserve_rate)?;
    state.begin_step(params, grads)?;
    for i in 0..params.len() {
        let key = MaskKey::new(state.seed, state.name(i), state.t, stream::GRADIENT);
        let g = sparsify_random(grads.data(i), reserve_rate, &key, true)?;
        let d = adam_delta(state, i, &g, params.data(i), hyper)?;
        for (p, d) in params.data_mut(i).iter_mut().zip(d) {
            *p += d;
        }
    }
    Ok(())
}

/// `shadow ← (1-c)·shadow + c·θ`; the first call seeds the shadow with `θ`.
pub fn ema_update(state: &mut OptimizerState, params: &ParameterSet, coefficient: f64) {
    let Some(shadow) = state.ema_shadow.as_mut() else {
        state.ema_shadow = Some(params.clone());
        return;
    };
    for i in 0..params.len() {
        for (s, &p) in shadow.data_mut(i).iter_mut().zip(params.data(i)) {
            *s = (1.0 - coefficient) * *s + coefficient * p;
        }
    }
}
