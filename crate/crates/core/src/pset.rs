//! Named-tensor parameter sets and delta arithmetic.
//!
//! A [`ParameterSet`] is an ordered list of named, shaped, row-major `f64`
//! tensors. Entry order is part of its identity: two sets with the same
//! tensors in a different order are *not* aligned. A [`DeltaSet`] is a
//! parameter difference `a - b` that remembers a content hash of the base it
//! was computed against.

use std::collections::HashSet;

use log::warn;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let name = name.into();
        if name.is_empty() {
            return Err(Error::InvalidParameterSet("empty tensor name".into()));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidParameterSet(format!(
                "tensor '{name}' has a zero dimension in shape {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidParameterSet(format!(
                "tensor '{name}': shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { name, shape, data })
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Result<Self> {
        let numel = shape.iter().product();
        Self::new(name, shape, vec![0.0; numel])
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Ordered collection of named tensors (a model checkpoint).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterSet {
    tensors: Vec<Tensor>,
}

impl ParameterSet {
    pub fn new(tensors: Vec<Tensor>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(tensors.len());
        for t in &tensors {
            let numel: usize = t.shape.iter().product();
            if t.name.is_empty() || numel != t.data.len() || t.shape.iter().any(|&d| d == 0) {
                return Err(Error::InvalidParameterSet(format!(
                    "tensor '{}' with shape {:?} and {} elements",
                    t.name,
                    t.shape,
                    t.data.len()
                )));
            }
            if !seen.insert(t.name.as_str()) {
                return Err(Error::InvalidParameterSet(format!(
                    "duplicate tensor name '{}'",
                    t.name
                )));
            }
        }
        Ok(Self { tensors })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    /// A zero-filled set with the same names and shapes.
    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: vec![0.0; t.data.len()],
                })
                .collect(),
        }
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|t| t.name.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }

    /// Mutable access to one tensor's values; names and shapes stay fixed.
    pub fn data_mut(&mut self, index: usize) -> &mut [f64] {
        &mut self.tensors[index].data
    }

    pub fn data(&self, index: usize) -> &[f64] {
        &self.tensors[index].data
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn into_tensors(self) -> Vec<Tensor> {
        self.tensors
    }

    pub fn is_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    /// Checks names, shapes and order against `other`, reporting the first
    /// offending entry.
    pub fn check_aligned(&self, other: &ParameterSet) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::MisalignedSets(format!(
                "entry count {} vs {}",
                self.tensors.len(),
                other.tensors.len()
            )));
        }
        for (i, (a, b)) in self.tensors.iter().zip(&other.tensors).enumerate() {
            if a.name != b.name {
                return Err(Error::MisalignedSets(format!(
                    "entry {i}: name '{}' vs '{}'",
                    a.name, b.name
                )));
            }
            if a.shape != b.shape {
                return Err(Error::MisalignedSets(format!(
                    "entry {i} ('{}'): shape {:?} vs {:?}",
                    a.name, a.shape, b.shape
                )));
            }
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and the raw little-endian payload, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.tensors.len() as u64).to_le_bytes());
        for t in &self.tensors {
            hasher.update((t.name.len() as u64).to_le_bytes());
            hasher.update(t.name.as_bytes());
            hasher.update((t.shape.len() as u64).to_le_bytes());
            for &d in &t.shape {
                hasher.update((d as u64).to_le_bytes());
            }
            for &x in &t.data {
                hasher.update(x.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0` and comparing NaN payloads.
    pub fn bit_eq(&self, other: &ParameterSet) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| {
                a.name == b.name
                    && a.shape == b.shape
                    && a.data.len() == b.data.len()
                    && a.data
                        .iter()
                        .zip(&b.data)
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    /// Largest elementwise `|a - b|`; sets must be aligned.
    pub fn max_abs_diff(&self, other: &ParameterSet) -> Result<f64> {
        self.check_aligned(other)?;
        Ok(self
            .tensors
            .iter()
            .zip(&other.tensors)
            .flat_map(|(a, b)| a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max))
    }

    fn zip_map(&self, other: &ParameterSet, f: impl Fn(f64, f64) -> f64) -> ParameterSet {
        ParameterSet {
            tensors: self
                .tensors
                .iter()
                .zip(&other.tensors)
                .map(|(a, b)| Tensor {
                    name: a.name.clone(),
                    shape: a.shape.clone(),
                    data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
                })
                .collect(),
        }
    }
}

/// Parameter difference `a - b`, aligned with the base `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaSet {
    values: ParameterSet,
    base_fingerprint: String,
}

impl DeltaSet {
    pub fn from_parts(values: ParameterSet, base_fingerprint: String) -> Self {
        Self {
            values,
            base_fingerprint,
        }
    }

    pub fn values(&self) -> &ParameterSet {
        &self.values
    }

    pub fn base_fingerprint(&self) -> &str {
        &self.base_fingerprint
    }

    pub fn into_values(self) -> ParameterSet {
        self.values
    }
}

/// Elementwise `a - b`. Fails before computing anything if the sets disagree
/// on names, shapes or order.
pub fn delta(a: &ParameterSet, b: &ParameterSet) -> Result<DeltaSet> {
    a.check_aligned(b)?;
    Ok(DeltaSet {
        values: a.zip_map(b, |x, y| x - y),
        base_fingerprint: b.fingerprint(),
    })
}

/// Elementwise `base + d`. A fingerprint mismatch is only logged: merges are
/// routinely applied relative to a model other than the one the delta came from.
pub fn apply_delta(base: &ParameterSet, d: &DeltaSet) -> Result<ParameterSet> {
    base.check_aligned(&d.values)?;
    if log::log_enabled!(log::Level::Warn) && base.fingerprint() != d.base_fingerprint {
        warn!("applying delta to a parameter set other than the one it was computed against");
    }
    Ok(base.zip_map(&d.values, |x, y| x + y))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(entries: &[(&str, &[f64])]) -> ParameterSet {
        ParameterSet::new(
            entries
                .iter()
                .map(|(n, v)| Tensor::new(*n, vec![v.len()], v.to_vec()).unwrap())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn delta_of_identical_sets_is_zero() {
        let a = set(&[("w", &[1.0, 2.0])]);
        let d = delta(&a, &a).unwrap();
        assert_eq!(d.values().data(0), &[0.0, 0.0]);
        assert_eq!(d.base_fingerprint(), a.fingerprint());
    }

    #[test]
    fn delta_subtracts_elementwise() {
        let a = set(&[("w", &[3.0, -1.0])]);
        let b = set(&[("w", &[1.0, 1.0])]);
        assert_eq!(delta(&a, &b).unwrap().values().data(0), &[2.0, -2.0]);
    }

    #[test]
    fn delta_rejects_name_mismatch() {
        let a = set(&[("w", &[1.0])]);
        let b = set(&[("v", &[1.0])]);
        assert!(matches!(delta(&a, &b), Err(Error::MisalignedSets(_))));
    }

    #[test]
    fn delta_rejects_order_and_shape_mismatch() {
        let a = set(&[("w", &[1.0]), ("v", &[1.0])]);
        let b = set(&[("v", &[1.0]), ("w", &[1.0])]);
        assert!(matches!(delta(&a, &b), Err(Error::MisalignedSets(_))));
        let c = set(&[("w", &[1.0, 2.0]), ("v", &[1.0])]);
        assert!(matches!(delta(&a, &c), Err(Error::MisalignedSets(_))));
    }

    #[test]
    fn apply_delta_examples() {
        let base = set(&[("w", &[1.0, 1.0])]);
        let zero = DeltaSet::from_parts(set(&[("w", &[0.0, 0.0])]), base.fingerprint());
        assert_eq!(apply_delta(&base, &zero).unwrap(), base);
        let d = DeltaSet::from_parts(set(&[("w", &[2.0, -2.0])]), base.fingerprint());
        assert_eq!(apply_delta(&base, &d).unwrap().data(0), &[3.0, -1.0]);
    }

    #[test]
    fn invalid_sets_are_rejected() {
        assert!(Tensor::new("", vec![1], vec![0.0]).is_err());
        assert!(Tensor::new("w", vec![2, 2], vec![0.0; 3]).is_err());
        let t = Tensor::new("w", vec![1], vec![0.0]).unwrap();
        assert!(ParameterSet::new(vec![t.clone(), t]).is_err());
    }

    #[test]
    fn fingerprint_depends_on_order() {
        let a = set(&[("w", &[1.0]), ("v", &[2.0])]);
        let b = set(&[("v", &[2.0]), ("w", &[1.0])]);
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint(), a.clone().fingerprint());
    }
}
