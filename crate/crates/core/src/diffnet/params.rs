use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::Mat64;

/// Named parameter tensors in insertion order. Vectors are stored as
/// single-row or single-column matrices.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Mat64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Mat64) -> Result<()> {
        if self.index_of(name).is_some() {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        if !value.all_finite() {
            return Err(Error::NonFinite(format!("parameter `{name}`")));
        }
        self.names.push(name.to_string());
        self.tensors.push(value);
        Ok(())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Mat64> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn require(&self, name: &str) -> Result<&Mat64> {
        self.get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    /// Replaces a tensor; its shape may not change.
    pub fn set(&mut self, name: &str, value: Mat64) -> Result<()> {
        let i = self
            .index_of(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if self.tensors[i].shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                expected: self.tensors[i].shape(),
                found: value.shape(),
            });
        }
        self.tensors[i] = value;
        Ok(())
    }

    pub(crate) fn tensor(&self, idx: usize) -> &Mat64 {
        &self.tensors[idx]
    }

    pub(crate) fn tensor_mut(&mut self, idx: usize) -> &mut Mat64 {
        &mut self.tensors[idx]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat64)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.as_slice().len()).sum()
    }

    /// SHA-256 over the names, shapes and raw bits of every tensor whose
    /// name starts with `prefix`.
    pub fn fingerprint(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter().filter(|(n, _)| n.starts_with(prefix)) {
            h.update(name.as_bytes());
            h.update((t.rows() as u64).to_le_bytes());
            h.update((t.cols() as u64).to_le_bytes());
            for v in t.as_slice() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Flat view of scalar coordinate `k` across all tensors, in order.
    pub(crate) fn locate(&self, mut k: usize) -> Option<(usize, usize)> {
        for (i, t) in self.tensors.iter().enumerate() {
            let n = t.as_slice().len();
            if k < n {
                return Some((i, k));
            }
            k -= n;
        }
        None
    }

    /// Euclidean distance to another store with the same layout.
    pub fn distance(&self, other: &ParamStore) -> Result<f64> {
        if self.names != other.names {
            return Err(Error::InvalidConfig(
                "parameter stores differ in layout".into(),
            ));
        }
        let mut s = 0.0;
        for (a, b) in self.tensors.iter().zip(&other.tensors) {
            s += a.sub(b)?.as_slice().iter().map(|v| v * v).sum::<f64>();
        }
        Ok(s.sqrt())
    }
}

/// Gradient tensors congruent with the [`ParamStore`] they differentiate.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    names: Vec<String>,
    tensors: Vec<Mat64>,
}

impl Gradient {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            names: store.names.clone(),
            tensors: store
                .tensors
                .iter()
                .map(|t| Mat64::zeros(t.rows(), t.cols()))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Mat64> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub(crate) fn tensor(&self, idx: usize) -> &Mat64 {
        &self.tensors[idx]
    }

    pub(crate) fn tensor_mut(&mut self, idx: usize) -> &mut Mat64 {
        &mut self.tensors[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat64)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn is_congruent(&self, store: &ParamStore) -> bool {
        self.names == store.names
            && self
                .tensors
                .iter()
                .zip(&store.tensors)
                .all(|(g, p)| g.shape() == p.shape())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Mat64::all_finite)
    }

    /// Entries of the named tensors, concatenated in the given order.
    pub fn flatten(&self, names: &[&str]) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for n in names {
            let t = self
                .get(n)
                .ok_or_else(|| Error::UnknownParam(n.to_string()))?;
            out.extend_from_slice(t.as_slice());
        }
        Ok(out)
    }
}
