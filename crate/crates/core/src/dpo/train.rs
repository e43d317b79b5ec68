//! Pretrain → SFT → DPO pipeline.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::mask::derive_seed;
use crate::optim::{AdamHyper, MergeVariant, Optimizer, OptimizerKind};
use crate::pset::{delta, ParameterSet};

use super::data::TaskSuite;
use super::loss::{cross_entropy_and_grad, dpo_loss, dpo_loss_and_grad, Example, PreferencePair};
use super::policy::{PolicyShape, ToyPolicy};

/// A supervised phase: plain Adam on cross-entropy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhaseConfig {
    pub steps: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for PhaseConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            learning_rate: 1e-2,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpoConfig {
    pub beta: f64,
    pub steps: u64,
    pub eval_every: u64,
    pub batch_size: usize,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            steps: 500,
            eval_every: 10,
            batch_size: 32,
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidBeta(self.beta));
        }
        if self.eval_every == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "eval_every and batch_size must be positive".into(),
            ));
        }
        Ok(())
    }
}

fn sample_batch<'a, T>(rng: &mut ChaCha8Rng, data: &'a [T], n: usize) -> Vec<&'a T> {
    (0..n)
        .map(|_| &data[rng.random_range(0..data.len() as u64) as usize])
        .collect()
}

/// Trains `policy` in place with bias-corrected Adam on cross-entropy.
pub fn supervised_phase(
    policy: &mut ToyPolicy,
    data: &[Example],
    phase: &PhaseConfig,
    seed: u64,
) -> Result<()> {
    if data.is_empty() || phase.batch_size == 0 {
        return Err(Error::InvalidConfig(
            "supervised phase needs data and a batch size".into(),
        ));
    }
    let hyper = AdamHyper::default().with_learning_rate(phase.learning_rate);
    let mut opt = Optimizer::new(
        OptimizerKind::Adam,
        hyper,
        policy.params(),
        None,
        seed,
        None,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for step in 1..=phase.steps {
        let batch: Vec<Example> = sample_batch(&mut rng, data, phase.batch_size)
            .into_iter()
            .cloned()
            .collect();
        let (loss, grad) = cross_entropy_and_grad(policy, &batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        opt.step(policy.params_mut(), &grad)?;
    }
    Ok(())
}

/// Builds the pretrained (`θ_b`) and SFT (`θ_r`) checkpoints.
pub fn prepare_models(
    suite: &TaskSuite,
    hidden_dim: usize,
    pretrain: &PhaseConfig,
    sft: &PhaseConfig,
    seed: u64,
) -> Result<(ParameterSet, ParameterSet)> {
    let shape = policy_shape(suite, hidden_dim);
    let mut policy = ToyPolicy::init(shape, derive_seed(seed, "init"))?;
    supervised_phase(
        &mut policy,
        &suite.pretrain_train,
        pretrain,
        derive_seed(seed, "pretrain"),
    )?;
    let base = policy.params().clone();
    supervised_phase(&mut policy, &suite.sft_train, sft, derive_seed(seed, "sft"))?;
    Ok((base, policy.into_params()))
}

pub fn policy_shape(suite: &TaskSuite, hidden_dim: usize) -> PolicyShape {
    PolicyShape {
        input_dim: suite.config.input_dim,
        hidden_dim,
        num_responses: suite.config.num_responses,
    }
}

pub fn accuracy(policy: &ToyPolicy, data: &[Example]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let correct = data.iter().filter(|e| policy.predict(&e.x) == e.y).count();
    correct as f64 / data.len() as f64
}

pub const METRICS_HEADER: &str =
    "step,dpo_loss,reward_margin,pref_accuracy,pretrain_accuracy,sft_accuracy";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub step: u64,
    pub dpo_loss: f64,
    /// Mean implicit reward margin on the preference eval split.
    pub reward_margin: f64,
    /// Fraction of eval pairs with a positive margin.
    pub pref_accuracy: f64,
    /// Accuracy on distribution A: the forgetting probe.
    pub pretrain_accuracy: f64,
    pub sft_accuracy: f64,
}

impl RunRecord {
    fn is_finite(&self) -> bool {
        [
            self.dpo_loss,
            self.reward_margin,
            self.pref_accuracy,
            self.pretrain_accuracy,
            self.sft_accuracy,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub records: Vec<RunRecord>,
}

impl RunMetrics {
    pub fn first(&self) -> Option<&RunRecord> {
        self.records.first()
    }

    pub fn last(&self) -> Option<&RunRecord> {
        self.records.last()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.step,
                r.dpo_loss,
                r.reward_margin,
                r.pref_accuracy,
                r.pretrain_accuracy,
                r.sft_accuracy
            )
            .expect("writing to a String");
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(METRICS_HEADER) {
            return Err(Error::Format("metrics CSV header mismatch".into()));
        }
        let records = lines
            .filter(|l| !l.is_empty())
            .map(|line| {
                let f: Vec<&str> = line.split(',').collect();
                let num = |i: usize| -> Result<f64> {
                    f.get(i)
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| Error::Format(format!("bad metrics row '{line}'")))
                };
                if f.len() != 6 {
                    return Err(Error::Format(format!("bad metrics row '{line}'")));
                }
                Ok(RunRecord {
                    step: f[0]
                        .parse()
                        .map_err(|_| Error::Format(format!("bad step in '{line}'")))?,
                    dpo_loss: num(1)?,
                    reward_margin: num(2)?,
                    pref_accuracy: num(3)?,
                    pretrain_accuracy: num(4)?,
                    sft_accuracy: num(5)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { records })
    }
}

/// Evaluates `policy` against `reference` on every eval split.
pub fn evaluate(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    suite: &TaskSuite,
    beta: f64,
    step: u64,
) -> Result<RunRecord> {
    let (loss, margins) = dpo_loss(policy, reference, &suite.pref_eval, beta)?;
    let n = margins.len().max(1) as f64;
    Ok(RunRecord {
        step,
        dpo_loss: loss,
        reward_margin: margins.iter().sum::<f64>() / n,
        pref_accuracy: margins.iter().filter(|m| **m > 0.0).count() as f64 / n,
        pretrain_accuracy: accuracy(policy, &suite.pretrain_eval),
        sft_accuracy: accuracy(policy, &suite.sft_eval),
    })
}

/// DPO optimizer settings for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSpec {
    pub kind: OptimizerKind,
    pub hyper: AdamHyper,
    pub ema_coefficient: Option<f64>,
    pub dpo: DpoConfig,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    /// Exported weights (the EMA shadow when EMA is enabled).
    pub final_params: ParameterSet,
    pub metrics: RunMetrics,
}

#[derive(Debug, Error)]
#[error("run aborted at step {step} (last good step {last_good_step}): {source}")]
pub struct RunAborted {
    pub step: u64,
    pub last_good_step: u64,
    pub metrics: RunMetrics,
    #[source]
    pub source: Error,
}

/// Runs `spec.dpo.steps` DPO steps starting from (and referenced to) `reference`.
///
/// Metrics are logged at step 0, every `eval_every` steps and at the final
/// step. A non-finite loss or gradient aborts the run, keeping the metrics
/// logged so far.
pub fn train_run(
    suite: &TaskSuite,
    shape: PolicyShape,
    base: &ParameterSet,
    reference: &ParameterSet,
    spec: &TrainSpec,
) -> std::result::Result<RunOutput, RunAborted> {
    let mut metrics = RunMetrics::default();
    let mut last_good_step = 0;
    let abort = |step, last_good_step, metrics: RunMetrics, source| RunAborted {
        step,
        last_good_step,
        metrics,
        source,
    };
    let setup = || -> Result<(ToyPolicy, ToyPolicy, Optimizer)> {
        spec.dpo.validate()?;
        let reference_policy = ToyPolicy::from_params(shape, reference.clone())?;
        let policy = reference_policy.clone();
        let mut kind = spec.kind.clone();
        if let OptimizerKind::Online(cfg) = &mut kind {
            if cfg.variant == MergeVariant::FullMerge && cfg.base_for_full_merge.is_none() {
                cfg.base_for_full_merge = Some(base.clone());
            }
        }
        let tau = delta(reference, base)?;
        let opt = Optimizer::new(
            kind,
            spec.hyper.clone(),
            reference,
            Some(tau),
            derive_seed(spec.seed, "masks"),
            spec.ema_coefficient,
        )?;
        Ok((policy, reference_policy, opt))
    };
    let (mut policy, reference_policy, mut opt) =
        setup().map_err(|e| abort(0, 0, RunMetrics::default(), e))?;

    let eval = |opt: &Optimizer, policy: &ToyPolicy, step| -> Result<RunRecord> {
        let exported = ToyPolicy::from_params(shape, opt.export_params(policy.params()).clone())?;
        let record = evaluate(&exported, &reference_policy, suite, spec.dpo.beta, step)?;
        if !record.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        Ok(record)
    };

    match eval(&opt, &policy, 0) {
        Ok(r) => metrics.records.push(r),
        Err(e) => return Err(abort(0, 0, metrics, e)),
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "dpo-batches"));
    for step in 1..=spec.dpo.steps {
        let batch: Vec<PreferencePair> =
            sample_batch(&mut rng, &suite.pref_train, spec.dpo.batch_size)
                .into_iter()
                .cloned()
                .collect();
        let result = dpo_loss_and_grad(&policy, &reference_policy, &batch, spec.dpo.beta).and_then(
            |(loss, _, grad)| {
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss { step });
                }
                opt.step(policy.params_mut(), &grad)
            },
        );
        if let Err(e) = result {
            return Err(abort(step, last_good_step, metrics, e));
        }
        last_good_step = step;
        if step % spec.dpo.eval_every == 0 || step == spec.dpo.steps {
            match eval(&opt, &policy, step) {
                Ok(r) => metrics.records.push(r),
                Err(e) => return Err(abort(step, last_good_step, metrics, e)),
            }
        }
    }

    Ok(RunOutput {
        final_params: opt.export_params(policy.params()).clone(),
        metrics,
    })
}
