//! Named parameter storage shared by all model components.
//!
//! Parameters live outside any graph. Each forward pass binds the ones it
//! touches into the pass's [`Graph`] as leaves via a [`Binder`], which also
//! routes gradients back out by name after `backward`. Iteration order is
//! always name-sorted, which keeps optimizer updates and checksums
//! deterministic.

use std::collections::BTreeMap;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Param {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Param { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Param {
            shape,
            data: vec![0.0; n],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    map: BTreeMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, param: Param) {
        let name = name.into();
        debug_assert!(!self.map.contains_key(&name), "duplicate param {}", name);
        self.map.insert(name, param);
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.map.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    /// Name-sorted iteration.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.map.values().map(|p| p.data.len()).sum()
    }

    /// Copy every `src_prefix.*` entry to `dst_prefix.*`.
    pub fn copy_prefix(&mut self, src_prefix: &str, dst_prefix: &str) {
        let copies: Vec<(String, Param)> = self
            .map
            .iter()
            .filter(|(name, _)| name.starts_with(src_prefix))
            .map(|(name, p)| {
                (
                    format!("{}{}", dst_prefix, &name[src_prefix.len()..]),
                    p.clone(),
                )
            })
            .collect();
        for (name, p) in copies {
            self.map.insert(name, p);
        }
    }

    /// SHA-256 over all `prefix.*` entries (name, shape, little-endian data),
    /// in name order. An empty prefix hashes the whole set.
    pub fn checksum(&self, prefix: &str) -> String {
        let mut hasher = Sha256::new();
        for (name, p) in self.map.iter().filter(|(n, _)| n.starts_with(prefix)) {
            hasher.update(name.as_bytes());
            hasher.update([0u8]);
            for d in &p.shape {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in &p.data {
                hasher.update(v.to_le_bytes());
            }
        }
        hex(&hasher.finalize())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{:02x}", b)).collect()
}

/// Binds named parameters into one graph, caching so a parameter used
/// several times in a pass maps to a single leaf (fan-out then accumulates
/// its gradient additively).
pub struct Binder {
    frozen_prefixes: Vec<String>,
    bound: BTreeMap<String, Tensor>,
}

impl Binder {
    /// `frozen_prefixes` bind as constants; everything else binds trainable.
    pub fn new(frozen_prefixes: &[&str]) -> Self {
        Binder {
            frozen_prefixes: frozen_prefixes.iter().map(|s| s.to_string()).collect(),
            bound: BTreeMap::new(),
        }
    }

    /// Bind everything as constants (evaluation passes).
    pub fn all_frozen() -> Self {
        Binder::new(&[""])
    }

    pub fn bind(&mut self, g: &mut Graph, params: &ParamSet, name: &str) -> Tensor {
        if let Some(&t) = self.bound.get(name) {
            return t;
        }
        let p = params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {}", name));
        let trainable = !self.frozen_prefixes.iter().any(|f| name.starts_with(f));
        let t = g.leaf(p.data.clone(), p.shape.clone(), trainable);
        self.bound.insert(name.to_string(), t);
        t
    }

    /// Collect gradients for every bound trainable parameter after a
    /// backward pass. Parameters the loss did not reach are absent.
    pub fn grads(&self, g: &Graph) -> BTreeMap<String, Vec<f64>> {
        let mut out = BTreeMap::new();
        for (name, &t) in &self.bound {
            if g.requires_grad(t) {
                if let Some(grad) = g.grad(t) {
                    out.insert(name.clone(), grad.to_vec());
                }
            }
        }
        out
    }
}

/// Xavier/Glorot uniform initialization for a `[fan_in, fan_out]` weight.
pub fn xavier_uniform(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-bound..bound))
        .collect()
}

/// Small uniform values for embeddings and positional tables.
pub fn uniform_init(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

/// Error helper: the optimizer and trainer report missing gradients by name.
pub fn missing_grad_error(expected: &[String], grads: &BTreeMap<String, Vec<f64>>) -> Option<Error> {
    let missing: Vec<String> = expected
        .iter()
        .filter(|n| !grads.contains_key(*n))
        .cloned()
        .collect();
    if missing.is_empty() {
        None
    } else {
        Some(Error::MissingGrad { names: missing })
    }
}

pub type GradMap = BTreeMap<String, Vec<f64>>;
