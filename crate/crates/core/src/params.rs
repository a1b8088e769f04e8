//! Named parameter storage with per-name freeze flags.
//!
//! Every model in this crate keeps its weights in a [`ParamStore`]: a sorted
//! map from dotted parameter names ("lm.block0.attn.q.w") to matrices. Train
//! policies toggle the trainable set by component prefix; asset bundles save
//! and restore exactly the trainable subset.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::tensor::Matrix;

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    map: BTreeMap<String, Matrix>,
    trainable: BTreeSet<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        let name = name.into();
        assert!(
            self.map.insert(name.clone(), value).is_none(),
            "duplicate parameter {name}"
        );
    }

    pub fn remove(&mut self, name: &str) -> Option<Matrix> {
        self.trainable.remove(name);
        self.map.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn get(&self, name: &str) -> &Matrix {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Matrix {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Matrix> {
        self.map.get(name)
    }

    pub fn set(&mut self, name: &str, value: Matrix) {
        let slot = self.get_mut(name);
        assert_eq!(slot.shape(), value.shape(), "shape change for {name}");
        *slot = value;
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names_with_prefix(&self, prefix: &str) -> Vec<String> {
        self.map
            .keys()
            .filter(|k| k.starts_with(prefix))
            .cloned()
            .collect()
    }

    pub fn scalar_count(&self) -> usize {
        self.map.values().map(|m| m.len()).sum()
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable.contains(name)
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.trainable.iter().cloned().collect()
    }

    pub fn trainable_scalar_count(&self) -> usize {
        self.trainable.iter().map(|n| self.get(n).len()).sum()
    }

    pub fn freeze_all(&mut self) {
        self.trainable.clear();
    }

    pub fn mark_trainable(&mut self, name: &str) {
        assert!(self.contains(name), "unknown parameter {name}");
        self.trainable.insert(name.to_string());
    }

    pub fn mark_trainable_prefix(&mut self, prefix: &str) -> usize {
        let names = self.names_with_prefix(prefix);
        for n in &names {
            self.trainable.insert(n.clone());
        }
        names.len()
    }

    pub fn mark_trainable_all(&mut self) {
        let names: Vec<String> = self.map.keys().cloned().collect();
        for n in names {
            self.trainable.insert(n);
        }
    }

    /// L∞ distance between two stores over names with the given prefix.
    pub fn linf_diff_prefix(&self, other: &ParamStore, prefix: &str) -> f64 {
        let mut max = 0.0f64;
        for name in self.names_with_prefix(prefix) {
            max = max.max(self.get(&name).max_abs_diff(other.get(&name)));
        }
        max
    }

    /// Rounds every value of the named parameters through f32. Keeps the
    /// in-memory model identical to what an f32 asset payload will restore.
    pub fn quantize_to_f32(&mut self, names: &[String]) {
        for name in names {
            let m = self.get_mut(name);
            for v in m.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Deterministic per-parameter RNG: the stream depends only on the master
/// seed and the parameter name, never on insertion order.
pub fn rng_for(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// uniform(−1/√fan_in, +1/√fan_in)
pub fn init_uniform(seed: u64, name: &str, rows: usize, cols: usize, fan_in: usize) -> Matrix {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let mut rng = rng_for(seed, name);
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-bound..bound))
}
