//! Named parameter storage shared by every model component.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::tensor::Mat;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Mat>,
}

impl ParamStore {
    pub fn insert(&mut self, name: impl Into<String>, value: Mat) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn extend(&mut self, other: ParamStore) {
        self.params.extend(other.params);
    }

    pub fn scalar_count(&self) -> usize {
        self.params.values().map(Mat::len).sum()
    }

    /// SHA-256 over the names, shapes and little-endian values of the
    /// parameters accepted by `filter`, in name order.
    pub fn checksum(&self, filter: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for (name, m) in self.params.iter().filter(|(n, _)| filter(n)) {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((m.rows() as u64).to_le_bytes());
            h.update((m.cols() as u64).to_le_bytes());
            for v in m.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Gaussian-initialized matrix.
pub fn normal_mat<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Mat {
    let dist = Normal::new(0.0, std).expect("finite std");
    Mat::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| dist.sample(rng)).collect(),
    )
}

/// Registers `{prefix}.weight` (`d_in × d_out`) and `{prefix}.bias`.
pub fn init_linear<R: Rng + ?Sized>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    std: f64,
) {
    store.insert(
        format!("{prefix}.weight"),
        normal_mat(rng, d_in, d_out, std),
    );
    store.insert(format!("{prefix}.bias"), Mat::zeros(1, d_out));
}

/// Registers `{prefix}.gamma` (ones) and `{prefix}.beta` (zeros).
pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, dim: usize) {
    store.insert(format!("{prefix}.gamma"), Mat::filled(1, dim, 1.0));
    store.insert(format!("{prefix}.beta"), Mat::zeros(1, dim));
}
