//! Synthetic pretrain / SFT / preference tasks.
//!
//! * Distribution A ("pretrain"): Gaussian clusters, label = cluster id.
//! * Distribution B ("SFT"): the same clusters rotated and shifted away from A.
//! * Preferences: inputs from B, two distinct responses ranked by a latent
//!   linear utility `u(x, y) = v_y · (x - shift)`, with the order flipped at
//!   rate `label_noise`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::loss::{Example, PreferencePair};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteConfig {
    pub input_dim: usize,
    pub num_responses: usize,
    pub pretrain_train: usize,
    pub pretrain_eval: usize,
    pub sft_train: usize,
    pub sft_eval: usize,
    pub pref_train: usize,
    pub pref_eval: usize,
    /// Scale of the cluster centers.
    pub cluster_spread: f64,
    /// Standard deviation of samples around their center.
    pub cluster_noise: f64,
    /// Distance between the A and B domains.
    pub domain_shift: f64,
    /// Probability of swapping chosen and rejected.
    pub label_noise: f64,
    /// Cosine between each response's utility direction and its own B
    /// cluster direction. Negative values make preferences disfavor the
    /// SFT label.
    pub utility_alignment: f64,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            input_dim: 8,
            num_responses: 4,
            pretrain_train: 2000,
            pretrain_eval: 500,
            sft_train: 2000,
            sft_eval: 500,
            pref_train: 2000,
            pref_eval: 500,
            cluster_spread: 2.5,
            cluster_noise: 1.0,
            domain_shift: 6.0,
            label_noise: 0.1,
            utility_alignment: -0.6,
            seed: 0,
        }
    }
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            self.input_dim,
            self.pretrain_train,
            self.pretrain_eval,
            self.sft_train,
            self.sft_eval,
            self.pref_train,
            self.pref_eval,
        ];
        if sizes.contains(&0) {
            return Err(Error::InvalidConfig("suite sizes must be positive".into()));
        }
        if self.num_responses < 2 {
            return Err(Error::InvalidConfig("need at least two responses".into()));
        }
        if !(0.0..=0.5).contains(&self.label_noise) {
            return Err(Error::InvalidConfig(format!(
                "label noise {} outside [0, 0.5]",
                self.label_noise
            )));
        }
        if !(-1.0..=1.0).contains(&self.utility_alignment) {
            return Err(Error::InvalidConfig(format!(
                "utility alignment {} outside [-1, 1]",
                self.utility_alignment
            )));
        }
        for (what, v) in [
            ("cluster_spread", self.cluster_spread),
            ("cluster_noise", self.cluster_noise),
            ("domain_shift", self.domain_shift),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!("{what} = {v}")));
            }
        }
        Ok(())
    }
}

/// Latent generative parameters, kept for oracles and diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Latents {
    pub centers_a: Vec<Vec<f64>>,
    pub centers_b: Vec<Vec<f64>>,
    pub shift: Vec<f64>,
    /// One utility direction per response.
    pub utility: Vec<Vec<f64>>,
}

impl Latents {
    pub fn utility(&self, x: &[f64], y: usize) -> f64 {
        self.utility[y]
            .iter()
            .zip(x.iter().zip(&self.shift))
            .map(|(v, (x, s))| v * (x - s))
            .sum()
    }

    /// Nearest-center classifier for distribution A.
    pub fn classify_a(&self, x: &[f64]) -> usize {
        nearest(&self.centers_a, x)
    }
}

fn nearest(centers: &[Vec<f64>], x: &[f64]) -> usize {
    centers
        .iter()
        .map(|c| c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .enumerate()
        .fold(
            (0, f64::INFINITY),
            |best, (i, d)| if d < best.1 { (i, d) } else { best },
        )
        .0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSuite {
    pub config: SuiteConfig,
    pub latents: Latents,
    pub pretrain_train: Vec<Example>,
    pub pretrain_eval: Vec<Example>,
    pub sft_train: Vec<Example>,
    pub sft_eval: Vec<Example>,
    pub pref_train: Vec<PreferencePair>,
    pub pref_eval: Vec<PreferencePair>,
    /// Whether each preference pair had its label flipped.
    pub pref_train_flipped: Vec<bool>,
    pub pref_eval_flipped: Vec<bool>,
}

struct Sampler {
    rng: ChaCha8Rng,
}

impl Sampler {
    fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    fn vector(&mut self, n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|_| scale * self.normal()).collect()
    }

    fn index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n as u64) as usize
    }

    fn bernoulli(&mut self, p: f64) -> bool {
        self.rng.random::<f64>() < p
    }

    /// Random orthogonal matrix (rows) by Gram-Schmidt on a Gaussian matrix.
    fn rotation(&mut self, d: usize) -> Vec<Vec<f64>> {
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(d);
        while rows.len() < d {
            let mut v = self.vector(d, 1.0);
            for r in &rows {
                let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(r).for_each(|(a, b)| *a -= dot * b);
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-6 {
                v.iter_mut().for_each(|a| *a /= norm);
                rows.push(v);
            }
        }
        rows
    }

    fn around(&mut self, center: &[f64], noise: f64) -> Vec<f64> {
        center.iter().map(|c| c + noise * self.normal()).collect()
    }
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if n == 0.0 {
        return v;
    }
    v.into_iter().map(|a| a / n).collect()
}

fn labelled(s: &mut Sampler, centers: &[Vec<f64>], noise: f64, n: usize) -> Vec<Example> {
    (0..n)
        .map(|_| {
            let y = s.index(centers.len());
            Example {
                x: s.around(&centers[y], noise),
                y,
            }
        })
        .collect()
}

fn preferences(
    s: &mut Sampler,
    latents: &Latents,
    cfg: &SuiteConfig,
    n: usize,
) -> (Vec<PreferencePair>, Vec<bool>) {
    let c = cfg.num_responses;
    (0..n)
        .map(|_| {
            let cluster = s.index(c);
            let x = s.around(&latents.centers_b[cluster], cfg.cluster_noise);
            let y1 = s.index(c);
            let y2 = (y1 + 1 + s.index(c - 1)) % c;
            let (mut chosen, mut rejected) = if latents.utility(&x, y1) >= latents.utility(&x, y2) {
                (y1, y2)
            } else {
                (y2, y1)
            };
            let flipped = s.bernoulli(cfg.label_noise);
            if flipped {
                std::mem::swap(&mut chosen, &mut rejected);
            }
            (
                PreferencePair {
                    x,
                    chosen,
                    rejected,
                },
                flipped,
            )
        })
        .unzip()
}

/// Deterministic in `cfg` (including its seed).
pub fn gen_task_suite(cfg: &SuiteConfig) -> Result<TaskSuite> {
    cfg.validate()?;
    let (d, c) = (cfg.input_dim, cfg.num_responses);
    let mut s = Sampler {
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
    };
    let centers_a: Vec<Vec<f64>> = (0..c).map(|_| s.vector(d, cfg.cluster_spread)).collect();
    let rotation = s.rotation(d);
    let direction = {
        let v = s.vector(d, 1.0);
        unit(v)
    };
    let shift: Vec<f64> = direction.iter().map(|u| u * cfg.domain_shift).collect();
    let centers_b: Vec<Vec<f64>> = centers_a
        .iter()
        .map(|mu| {
            rotation
                .iter()
                .zip(&shift)
                .map(|(row, s)| row.iter().zip(mu).map(|(r, m)| r * m).sum::<f64>() + s)
                .collect()
        })
        .collect();
    let a = cfg.utility_alignment;
    let utility = centers_b
        .iter()
        .map(|cb: &Vec<f64>| {
            let own = unit(cb.iter().zip(&shift).map(|(c, s)| c - s).collect());
            let random = unit(s.vector(d, 1.0));
            own.iter()
                .zip(&random)
                .map(|(o, r)| a * o + (1.0 - a * a).sqrt() * r)
                .collect()
        })
        .collect();
    let latents = Latents {
        centers_a,
        centers_b,
        shift,
        utility,
    };

    let pretrain_train = labelled(
        &mut s,
        &latents.centers_a,
        cfg.cluster_noise,
        cfg.pretrain_train,
    );
    let pretrain_eval = labelled(
        &mut s,
        &latents.centers_a,
        cfg.cluster_noise,
        cfg.pretrain_eval,
    );
    let sft_train = labelled(&mut s, &latents.centers_b, cfg.cluster_noise, cfg.sft_train);
    let sft_eval = labelled(&mut s, &latents.centers_b, cfg.cluster_noise, cfg.sft_eval);
    let (pref_train, pref_train_flipped) = preferences(&mut s, &latents, cfg, cfg.pref_train);
    let (pref_eval, pref_eval_flipped) = preferences(&mut s, &latents, cfg, cfg.pref_eval);

    Ok(TaskSuite {
        config: cfg.clone(),
        latents,
        pretrain_train,
        pretrain_eval,
        sft_train,
        sft_eval,
        pref_train,
        pref_eval,
        pref_train_flipped,
        pref_eval_flipped,
    })
}
