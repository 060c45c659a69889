//! Named parameter registry and per-tape binding.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// 64-bit FNV-1a; stable across platforms and toolchains.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Deterministic RNG for the tensor called `name` under `seed`.
pub fn tensor_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()))
}

/// Normal init, rounded to `f32` storage precision.
pub fn normal_tensor(seed: u64, name: &str, shape: &[usize], std: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    if std > 0.0 {
        let mut rng = tensor_rng(seed, name);
        let dist = Normal::new(0.0, std).expect("std is positive");
        for v in t.data_mut() {
            *v = dist.sample(&mut rng);
        }
    }
    t.quantize_f32();
    t
}

/// Normal init with samples beyond two standard deviations redrawn.
pub fn truncated_normal_tensor(seed: u64, name: &str, shape: &[usize], std: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    let mut rng = tensor_rng(seed, name);
    let dist = Normal::new(0.0, 1.0).expect("unit normal");
    for v in t.data_mut() {
        let z = loop {
            let z: f64 = dist.sample(&mut rng);
            if z.abs() <= 2.0 {
                break z;
            }
        };
        *v = z * std;
    }
    t.quantize_f32();
    t
}

pub fn filled_tensor(shape: &[usize], value: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    t.data_mut().fill(value);
    t
}

/// Ordered map of named tensors, each flagged trainable or frozen.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
    trainable: BTreeSet<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) {
        let name = name.into();
        if trainable {
            self.trainable.insert(name.clone());
        } else {
            self.trainable.remove(&name);
        }
        self.tensors.insert(name, tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn expect(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable.contains(name)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        if !self.tensors.contains_key(name) {
            return Err(Error::Config(format!("unknown parameter `{name}`")));
        }
        if trainable {
            self.trainable.insert(name.to_string());
        } else {
            self.trainable.remove(name);
        }
        Ok(())
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.trainable.iter().map(String::as_str)
    }

    pub fn numel_where(&self, mut pred: impl FnMut(&str) -> bool) -> usize {
        self.tensors
            .iter()
            .filter(|(k, _)| pred(k))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.numel_where(|n| self.trainable.contains(n))
    }

    /// SHA-256 over name, shape and exact `f64` bits of every tensor whose name
    /// starts with `prefix`, in name order.
    pub fn content_hash(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.tensors.range(prefix.to_string()..) {
            if !name.starts_with(prefix) {
                break;
            }
            h.update(name.as_bytes());
            h.update([0u8]);
            h.update((t.rank() as u64).to_le_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn merge(&mut self, other: ParamStore) {
        for (name, t) in other.tensors {
            let trainable = other.trainable.contains(&name);
            self.insert(name, t, trainable);
        }
    }
}

/// Lazily places parameters on a tape, one leaf per name, so that repeated
/// uses within a batch accumulate into a single gradient.
pub struct Binder<'a> {
    store: &'a ParamStore,
    bound: HashMap<String, Var>,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            bound: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    /// Binds `name` to an existing node instead of the stored tensor.
    pub fn preset(&mut self, name: impl Into<String>, var: Var) {
        self.bound.insert(name.into(), var);
    }

    pub fn var(&mut self, tape: &mut Tape, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let t = self.store.expect(name)?.clone();
        let v = if self.store.is_trainable(name) {
            tape.param(t)
        } else {
            tape.constant(t)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn bound(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound.iter().map(|(k, v)| (k.as_str(), *v))
    }
}
