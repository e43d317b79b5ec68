use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pset::{ParameterSet, Tensor};

pub const HIDDEN_WEIGHT: &str = "hidden.weight";
pub const HIDDEN_BIAS: &str = "hidden.bias";
pub const OUT_WEIGHT: &str = "out.weight";
pub const OUT_BIAS: &str = "out.bias";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyShape {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_responses: usize,
}

impl PolicyShape {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.num_responses < 2 {
            return Err(Error::InvalidConfig(format!(
                "policy needs positive dims and at least two responses, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Cached activations of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Numerically stable log-softmax; the normalizer is summed in index order.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// Two-layer perceptron scoring a fixed set of candidate responses:
/// `logits = W2 · tanh(W1 · x + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyPolicy {
    shape: PolicyShape,
    params: ParameterSet,
}

impl ToyPolicy {
    pub fn init(shape: PolicyShape, seed: u64) -> Result<Self> {
        shape.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gaussian = |n: usize, scale: f64| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    scale * z
                })
                .collect::<Vec<f64>>()
        };
        let (d, h, c) = (shape.input_dim, shape.hidden_dim, shape.num_responses);
        let params = ParameterSet::new(vec![
            Tensor::new(
                HIDDEN_WEIGHT,
                vec![h, d],
                gaussian(h * d, (1.0 / d as f64).sqrt()),
            )?,
            Tensor::zeros(HIDDEN_BIAS, vec![h])?,
            Tensor::new(
                OUT_WEIGHT,
                vec![c, h],
                gaussian(c * h, (1.0 / h as f64).sqrt()),
            )?,
            Tensor::zeros(OUT_BIAS, vec![c])?,
        ])?;
        Ok(Self { shape, params })
    }

    /// Wraps an existing parameter set, checking its layout against `shape`.
    pub fn from_params(shape: PolicyShape, params: ParameterSet) -> Result<Self> {
        shape.validate()?;
        let (d, h, c) = (shape.input_dim, shape.hidden_dim, shape.num_responses);
        let expected = [
            (HIDDEN_WEIGHT, vec![h, d]),
            (HIDDEN_BIAS, vec![h]),
            (OUT_WEIGHT, vec![c, h]),
            (OUT_BIAS, vec![c]),
        ];
        let ok = params.len() == expected.len()
            && params
                .tensors()
                .iter()
                .zip(&expected)
                .all(|(t, (n, s))| t.name == *n && t.shape == *s);
        if !ok {
            return Err(Error::MisalignedSets(format!(
                "parameters do not describe a {d}-{h}-{c} policy"
            )));
        }
        Ok(Self { shape, params })
    }

    pub fn shape(&self) -> PolicyShape {
        self.shape
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    pub fn into_params(self) -> ParameterSet {
        self.params
    }

    pub fn forward(&self, x: &[f64]) -> Forward {
        let (d, h) = (self.shape.input_dim, self.shape.hidden_dim);
        debug_assert_eq!(x.len(), d);
        let (w1, b1) = (self.params.data(0), self.params.data(1));
        let (w2, b2) = (self.params.data(2), self.params.data(3));
        let hidden: Vec<f64> = (0..h)
            .map(|j| {
                let row = &w1[j * d..(j + 1) * d];
                (b1[j] + row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>()).tanh()
            })
            .collect();
        let logits = b2
            .iter()
            .enumerate()
            .map(|(c, b)| {
                let row = &w2[c * h..(c + 1) * h];
                b + row.iter().zip(&hidden).map(|(w, a)| w * a).sum::<f64>()
            })
            .collect();
        Forward { hidden, logits }
    }

    pub fn log_probs(&self, x: &[f64]) -> Vec<f64> {
        log_softmax(&self.forward(x).logits)
    }

    pub fn logprob(&self, x: &[f64], y: usize) -> Result<f64> {
        self.check_response(y)?;
        Ok(self.log_probs(x)[y])
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let logits = self.forward(x).logits;
        // first maximum wins
        logits
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &l)| {
                if l > best.1 {
                    (i, l)
                } else {
                    best
                }
            })
            .0
    }

    pub(crate) fn check_response(&self, y: usize) -> Result<()> {
        if y >= self.shape.num_responses {
            return Err(Error::IndexOutOfRange {
                index: y,
                count: self.shape.num_responses,
            });
        }
        Ok(())
    }

    /// Backpropagates an upstream gradient on the logits, accumulating into `grad`.
    pub fn backward(&self, x: &[f64], fwd: &Forward, dlogits: &[f64], grad: &mut ParameterSet) {
        let (d, h) = (self.shape.input_dim, self.shape.hidden_dim);
        let w2 = self.params.data(2);
        {
            let gb2 = grad.data_mut(3);
            for (g, dl) in gb2.iter_mut().zip(dlogits) {
                *g += dl;
            }
        }
        {
            let gw2 = grad.data_mut(2);
            for (c, dl) in dlogits.iter().enumerate() {
                for (g, a) in gw2[c * h..(c + 1) * h].iter_mut().zip(&fwd.hidden) {
                    *g += dl * a;
                }
            }
        }
        let dpre: Vec<f64> = (0..h)
            .map(|j| {
                let da: f64 = dlogits
                    .iter()
                    .enumerate()
                    .map(|(c, dl)| w2[c * h + j] * dl)
                    .sum();
                da * (1.0 - fwd.hidden[j] * fwd.hidden[j])
            })
            .collect();
        {
            let gb1 = grad.data_mut(1);
            for (g, dp) in gb1.iter_mut().zip(&dpre) {
                *g += dp;
            }
        }
        let gw1 = grad.data_mut(0);
        for (j, dp) in dpre.iter().enumerate() {
            for (g, xi) in gw1[j * d..(j + 1) * d].iter_mut().zip(x) {
                *g += dp * xi;
            }
        }
    }
}
