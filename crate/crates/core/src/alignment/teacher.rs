//! Frozen text/image teachers.
//!
//! Inputs are featurized by signed feature hashing of words and character
//! trigrams, then passed through a fixed random two-layer tanh MLP. Both kinds
//! share a base projection (so they start out roughly aligned, like a
//! pretrained image-text pair) plus a kind-specific perturbation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{matmul, Tensor};
use crate::params::{fnv1a, normal_tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherKind {
    Text,
    Image,
}

impl TeacherKind {
    fn tag(self) -> &'static str {
        match self {
            TeacherKind::Text => "text",
            TeacherKind::Image => "image",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub hash_dim: usize,
    pub hidden_dim: usize,
    pub seed: u64,
    /// Scale of the kind-specific weight perturbation.
    pub kind_offset: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            hash_dim: 256,
            hidden_dim: 64,
            seed: 99,
            kind_offset: 0.3,
        }
    }
}

const STOPWORDS: &[&str] = &["a", "an", "the", "of"];

/// Signed feature hash of lower-cased words (weight 1) and their boundary-marked
/// character trigrams (weight 0.5), L2-normalized.
pub fn hash_features(input: &str, dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    let lower = input.to_lowercase();
    let words = lower
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty() && !STOPWORDS.contains(w));
    let mut bump = |key: &str, weight: f64| {
        let h = fnv1a(key.as_bytes());
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        v[(h % dim as u64) as usize] += sign * weight;
    };
    for w in words {
        bump(&format!("w:{w}"), 1.0);
        let marked: Vec<char> = format!("#{w}#").chars().collect();
        for tri in marked.windows(3) {
            let s: String = tri.iter().collect();
            bump(&format!("c:{s}"), 0.5);
        }
    }
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in &mut v {
            *x /= n;
        }
    }
    v
}

/// Deterministic frozen embedder standing in for a pretrained tower.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherEmbedder {
    pub kind: TeacherKind,
    pub config: TeacherConfig,
    w1: Tensor,
    w2: Tensor,
}

impl TeacherEmbedder {
    pub fn new(kind: TeacherKind, config: TeacherConfig, joint_dim: usize) -> Self {
        let (f, h) = (config.hash_dim, config.hidden_dim);
        let seed = config.seed;
        let mix = |name: &str, shape: &[usize], std: f64| {
            let base = normal_tensor(seed, &format!("teacher.{name}"), shape, std);
            let own = normal_tensor(seed, &format!("teacher.{}.{name}", kind.tag()), shape, std);
            let data = base
                .data()
                .iter()
                .zip(own.data())
                .map(|(b, o)| b + config.kind_offset * o)
                .collect();
            Tensor::new(shape.to_vec(), data).expect("finite init")
        };
        // Hash features are unit norm, so scale the first layer up to keep tanh out of its linear range.
        let w1 = mix("w1", &[f, h], 3.0);
        let w2 = mix("w2", &[h, joint_dim], 1.0 / (h as f64).sqrt());
        Self {
            kind,
            config,
            w1,
            w2,
        }
    }

    pub fn joint_dim(&self) -> usize {
        self.w2.shape()[1]
    }

    /// Unnormalized embedding of `input`.
    pub fn embed(&self, input: &str) -> Result<Tensor> {
        if input.trim().is_empty() {
            return Err(Error::contract("teacher_embed", "input must be nonempty"));
        }
        let x = Tensor::new(
            vec![1, self.config.hash_dim],
            hash_features(input, self.config.hash_dim),
        )?;
        let mut hidden = matmul(&x, &self.w1)?;
        for v in hidden.data_mut() {
            *v = v.tanh();
        }
        let out = matmul(&hidden, &self.w2)?;
        let n = out.numel();
        out.reshape(vec![n])
    }
}

pub fn teacher_embed(embedder: &TeacherEmbedder, input: &str) -> Result<Tensor> {
    embedder.embed(input)
}

/// `v / ‖v‖₂`; a zero vector is a numeric error.
pub fn normalize_feature(v: &Tensor) -> Result<Tensor> {
    let n = v.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::Numeric(format!(
            "cannot normalize a vector of norm {n}"
        )));
    }
    Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x / n).collect())
}

/// The image and text teachers of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Teachers {
    pub image: TeacherEmbedder,
    pub text: TeacherEmbedder,
}

impl Teachers {
    pub fn new(config: TeacherConfig, joint_dim: usize) -> Self {
        Self {
            image: TeacherEmbedder::new(TeacherKind::Image, config, joint_dim),
            text: TeacherEmbedder::new(TeacherKind::Text, config, joint_dim),
        }
    }
}
