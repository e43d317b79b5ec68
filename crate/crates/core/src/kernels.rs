//! Sparsification and consensus kernels over flat arrays.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::mask::MaskKey;

pub(crate) fn check_probability(p: f64) -> Result<()> {
    if p > 0.0 && p <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidProbability(p))
    }
}

/// Bernoulli(p) random sparsification. Kept entries are divided by `p` when
/// `rescale` is set (offline DARE); online merging keeps them as is.
pub fn sparsify_random(x: &[f64], p: f64, key: &MaskKey, rescale: bool) -> Result<Vec<f64>> {
    check_probability(p)?;
    Ok(x.iter()
        .zip(key.uniforms())
        .map(|(&v, u)| match (u < p, rescale) {
            (false, _) => 0.0,
            (true, false) => v,
            (true, true) => v / p,
        })
        .collect())
}

/// Number of entries kept by [`sparsify_top_p`]: `ceil(p * n)`, at least one.
pub fn top_p_count(n: usize, p: f64) -> usize {
    ((p * n as f64).ceil() as usize).clamp(1, n.max(1))
}

/// Keeps the `ceil(p * n)` entries of largest magnitude; ties go to the lower index.
pub fn sparsify_top_p(x: &[f64], p: f64) -> Result<Vec<f64>> {
    check_probability(p)?;
    if x.is_empty() {
        return Err(Error::EmptyInput);
    }
    let k = top_p_count(x.len(), p);
    if k == x.len() {
        return Ok(x.to_vec());
    }
    let mut order: Vec<usize> = (0..x.len()).collect();
    let by_magnitude =
        |&i: &usize, &j: &usize| -> Ordering { x[j].abs().total_cmp(&x[i].abs()).then(i.cmp(&j)) };
    order.select_nth_unstable_by(k - 1, by_magnitude);
    let mut out = vec![0.0; x.len()];
    for &i in &order[..k] {
        out[i] = x[i];
    }
    Ok(out)
}

/// Sign consensus: agreeing signs add, on conflict the larger magnitude wins,
/// and an exact tie cancels to `a + b`. Zero agrees with every sign.
#[inline]
pub fn sign_consensus(a: f64, b: f64) -> f64 {
    if a == 0.0 || b == 0.0 || (a > 0.0) == (b > 0.0) {
        return a + b;
    }
    match a.abs().total_cmp(&b.abs()) {
        Ordering::Greater => a,
        Ordering::Less => b,
        Ordering::Equal => a + b,
    }
}

pub fn sign_consensus_slices(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::MisalignedSets(format!(
            "array lengths {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter()
        .zip(b)
        .map(|(&x, &y)| sign_consensus(x, y))
        .collect())
}

/// `sum_i w_i * x_i`, accumulated in input order.
pub fn linear_combine(terms: &[(f64, &[f64])]) -> Result<Vec<f64>> {
    let Some(((w0, first), rest)) = terms.split_first() else {
        return Ok(Vec::new());
    };
    let mut acc: Vec<f64> = first.iter().map(|v| w0 * v).collect();
    for (w, x) in rest {
        if x.len() != acc.len() {
            return Err(Error::MisalignedSets(format!(
                "array lengths {} vs {}",
                acc.len(),
                x.len()
            )));
        }
        for (a, v) in acc.iter_mut().zip(x.iter()) {
            *a += w * v;
        }
    }
    Ok(acc)
}
