use std::ops::Range;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::vocab;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub vocab_size: usize,
    /// Number of trailing context tokens the model reads.
    pub context_window: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub seed: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            vocab_size: vocab::VOCAB_SIZE,
            context_window: 96,
            embed_dim: 16,
            hidden_dim: 32,
            seed: 0,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("vocab_size", self.vocab_size),
            ("context_window", self.context_window),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
        ] {
            if v == 0 {
                return Err(Error::key(key, "must be at least 1"));
            }
        }
        if self.vocab_size != vocab::VOCAB_SIZE {
            return Err(Error::key(
                "vocab_size",
                format!("{} does not match the corpus vocabulary of {}", self.vocab_size, vocab::VOCAB_SIZE),
            ));
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        let (v, k, e, h) = (self.vocab_size, self.context_window, self.embed_dim, self.hidden_dim);
        let emb = 0..v * e;
        let w1 = emb.end..emb.end + k * e * h;
        let b1 = w1.end..w1.end + h;
        let w2 = b1.end..b1.end + h * v;
        let b2 = w2.end..w2.end + v;
        Layout { emb, w1, b1, w2, b2 }
    }

    pub fn param_count(&self) -> usize {
        self.layout().b2.end
    }
}

/// Offsets of each parameter block inside the flat vector.
///
/// `w1` is slot-major: entry `((slot * embed_dim + e) * hidden_dim + h)`.
/// `w2` is entry `(h * vocab_size + v)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub emb: Range<usize>,
    pub w1: Range<usize>,
    pub b1: Range<usize>,
    pub w2: Range<usize>,
    pub b2: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub config: PolicyConfig,
    pub values: Vec<f64>,
}

impl PolicyParams {
    /// Uniform(-0.1, 0.1) initialization from `config.seed`.
    pub fn init(config: PolicyConfig) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(config.seed, "policy-init", 0);
        let values = (0..config.param_count()).map(|_| r.gen_range(-0.1..0.1)).collect();
        Ok(PolicyParams { config, values })
    }

    pub fn zeros(config: PolicyConfig) -> Result<Self> {
        config.validate()?;
        Ok(PolicyParams {
            config,
            values: vec![0.0; config.param_count()],
        })
    }

    pub fn from_values(config: PolicyConfig, values: Vec<f64>) -> Result<Self> {
        config.validate()?;
        if values.len() != config.param_count() {
            return Err(Error::structural(format!(
                "{} values for a policy with {} parameters",
                values.len(),
                config.param_count()
            )));
        }
        Ok(PolicyParams { config, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `self -= lr * grad`
    pub fn descend(&mut self, grad: &GradVector, lr: f64) {
        for (p, g) in self.values.iter_mut().zip(&grad.values) {
            *p -= lr * g;
        }
    }

    pub fn distance(&self, other: &PolicyParams) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Gradient aligned index-for-index with [`PolicyParams::values`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradVector {
    pub values: Vec<f64>,
}

impl GradVector {
    pub fn zeros(len: usize) -> Self {
        GradVector { values: vec![0.0; len] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &GradVector, scale: f64) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.values.iter_mut().for_each(|v| *v *= s);
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn zero_range(&mut self, r: Range<usize>) {
        self.values[r].iter_mut().for_each(|v| *v = 0.0);
    }
}
