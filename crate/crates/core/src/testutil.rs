//! Shared fixtures for unit tests.

use rand::Rng as _;

use crate::policy::{PolicyConfig, PolicyParams, SeqPair};
use crate::rng;
use crate::vocab::{Token, VOCAB_SIZE};

/// A policy small enough for finite-difference sweeps.
pub fn small_config(seed: u64) -> PolicyConfig {
    PolicyConfig {
        context_window: 6,
        embed_dim: 4,
        hidden_dim: 5,
        seed,
        ..Default::default()
    }
}

/// Small-policy parameters scaled so that the outputs are far from uniform.
pub fn random_params(seed: u64, scale: f64) -> PolicyParams {
    let mut p = PolicyParams::init(small_config(seed)).unwrap();
    p.values.iter_mut().for_each(|v| *v *= scale);
    p
}

pub fn random_tokens(r: &mut rng::Rng, len: usize) -> Vec<Token> {
    (0..len).map(|_| r.gen_range(1..VOCAB_SIZE) as Token).collect()
}

pub fn random_pair(r: &mut rng::Rng, max_prompt: usize, max_response: usize) -> SeqPair {
    let lp = r.gen_range(1..=max_prompt);
    let lr = r.gen_range(1..=max_response);
    SeqPair {
        prompt: random_tokens(r, lp),
        response: random_tokens(r, lr),
    }
}

pub fn random_batch(seed: u64, n: usize) -> Vec<SeqPair> {
    let mut r = rng::stream(seed, "fixture-batch", 0);
    (0..n).map(|_| random_pair(&mut r, 8, 5)).collect()
}
