//! Forward and backward passes.
//!
//! The first layer acts on a concatenation of per-slot embeddings, so its
//! pre-activation is a sum of per-(slot, token) projections. [`Engine`] tabulates
//! those projections once per parameter vector, which turns every forward step into
//! `context_window` row additions. [`Accumulator`] mirrors that on the way back and
//! folds the per-(slot, token) sums into the embedding and first-layer gradients
//! once per batch.

use super::params::{GradVector, PolicyParams};
use crate::vocab::{self, Token};

pub struct Engine<'a> {
    params: &'a PolicyParams,
    proj: Vec<f64>,
}

/// Cached activations for one prediction step.
#[derive(Debug, Clone)]
pub struct Activation {
    pub window: Vec<Token>,
    pub hidden: Vec<f64>,
    pub logp: Vec<f64>,
}

impl Activation {
    pub fn probs(&self) -> impl Iterator<Item = f64> + '_ {
        self.logp.iter().map(|l| l.exp())
    }
}

/// The last `k` tokens of `seq[..end]`, left-padded with `[PAD]`.
pub fn window_into(seq: &[Token], end: usize, k: usize, out: &mut Vec<Token>) {
    out.clear();
    if end < k {
        out.resize(k - end, vocab::PAD);
        out.extend_from_slice(&seq[..end]);
    } else {
        out.extend_from_slice(&seq[end - k..end]);
    }
}

pub fn log_softmax_in_place(z: &mut [f64]) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.iter_mut().for_each(|v| *v -= lse);
}

impl<'a> Engine<'a> {
    pub fn new(params: &'a PolicyParams) -> Self {
        let c = &params.config;
        let (v, k, e, h) = (c.vocab_size, c.context_window, c.embed_dim, c.hidden_dim);
        let l = c.layout();
        let emb = &params.values[l.emb];
        let w1 = &params.values[l.w1];
        let mut proj = vec![0.0; k * v * h];
        for slot in 0..k {
            for tok in 0..v {
                let row = &mut proj[(slot * v + tok) * h..(slot * v + tok + 1) * h];
                for d in 0..e {
                    let x = emb[tok * e + d];
                    let w = &w1[(slot * e + d) * h..(slot * e + d + 1) * h];
                    for (r, wv) in row.iter_mut().zip(w) {
                        *r += x * wv;
                    }
                }
            }
        }
        Engine { params, proj }
    }

    pub fn params(&self) -> &PolicyParams {
        self.params
    }

    pub fn context_window(&self) -> usize {
        self.params.config.context_window
    }

    /// One prediction step on a full window of `context_window` tokens.
    pub fn step(&self, window: &[Token]) -> Activation {
        let c = &self.params.config;
        let (v, h) = (c.vocab_size, c.hidden_dim);
        debug_assert_eq!(window.len(), c.context_window);
        let l = c.layout();
        let mut hidden = self.params.values[l.b1].to_vec();
        for (slot, &tok) in window.iter().enumerate() {
            let row = &self.proj[(slot * v + tok as usize) * h..(slot * v + tok as usize + 1) * h];
            for (a, r) in hidden.iter_mut().zip(row) {
                *a += r;
            }
        }
        hidden.iter_mut().for_each(|a| *a = a.tanh());
        let w2 = &self.params.values[l.w2];
        let mut logp = self.params.values[l.b2].to_vec();
        for (j, &hj) in hidden.iter().enumerate() {
            for (z, w) in logp.iter_mut().zip(&w2[j * v..(j + 1) * v]) {
                *z += hj * w;
            }
        }
        log_softmax_in_place(&mut logp);
        Activation {
            window: window.to_vec(),
            hidden,
            logp,
        }
    }

    /// Step predicting the token at `seq[end]` from `seq[..end]`.
    pub fn step_at(&self, seq: &[Token], end: usize) -> Activation {
        let mut w = Vec::with_capacity(self.context_window());
        window_into(seq, end, self.context_window(), &mut w);
        self.step(&w)
    }

    /// Teacher-forced steps for every response position.
    pub fn trajectory(&self, prompt: &[Token], response: &[Token]) -> Vec<Activation> {
        let mut full = Vec::with_capacity(prompt.len() + response.len());
        full.extend_from_slice(prompt);
        full.extend_from_slice(response);
        (0..response.len()).map(|t| self.step_at(&full, prompt.len() + t)).collect()
    }
}

/// Gradient accumulator for losses expressed through per-step logit gradients.
pub struct Accumulator {
    slot_token: Vec<f64>,
    touched: Vec<bool>,
    grad: GradVector,
}

impl Accumulator {
    pub fn new(params: &PolicyParams) -> Self {
        let c = &params.config;
        Accumulator {
            slot_token: vec![0.0; c.context_window * c.vocab_size * c.hidden_dim],
            touched: vec![false; c.context_window * c.vocab_size],
            grad: GradVector::zeros(params.len()),
        }
    }

    /// Back-propagates `dlogits` (gradient w.r.t. the pre-softmax logits) of one step.
    pub fn backward(&mut self, engine: &Engine, act: &Activation, dlogits: &[f64]) {
        let params = engine.params;
        let c = &params.config;
        let (v, h) = (c.vocab_size, c.hidden_dim);
        let l = c.layout();
        let w2 = &params.values[l.w2.clone()];
        let g = &mut self.grad.values;
        for (gb, d) in g[l.b2.clone()].iter_mut().zip(dlogits) {
            *gb += d;
        }
        let mut da = vec![0.0; h];
        {
            let gw2 = &mut g[l.w2.clone()];
            for j in 0..h {
                let hj = act.hidden[j];
                let mut dh = 0.0;
                let grow = &mut gw2[j * v..(j + 1) * v];
                let wrow = &w2[j * v..(j + 1) * v];
                for t in 0..v {
                    grow[t] += hj * dlogits[t];
                    dh += wrow[t] * dlogits[t];
                }
                da[j] = dh * (1.0 - hj * hj);
            }
        }
        for (gb, d) in g[l.b1].iter_mut().zip(&da) {
            *gb += d;
        }
        for (slot, &tok) in act.window.iter().enumerate() {
            let idx = slot * v + tok as usize;
            self.touched[idx] = true;
            for (s, d) in self.slot_token[idx * h..(idx + 1) * h].iter_mut().zip(&da) {
                *s += d;
            }
        }
    }

    /// Folds the per-(slot, token) sums into the embedding and first-layer gradients.
    pub fn finish(mut self, params: &PolicyParams) -> GradVector {
        let c = &params.config;
        let (v, e, h) = (c.vocab_size, c.embed_dim, c.hidden_dim);
        let l = c.layout();
        let emb = &params.values[l.emb.clone()];
        let w1 = &params.values[l.w1.clone()];
        let (g_emb, rest) = self.grad.values.split_at_mut(l.w1.start);
        let g_w1 = &mut rest[..l.w1.len()];
        for (idx, _) in self.touched.iter().enumerate().filter(|(_, t)| **t) {
            let (slot, tok) = (idx / v, idx % v);
            let s = &self.slot_token[idx * h..(idx + 1) * h];
            for d in 0..e {
                let x = emb[tok * e + d];
                let base = (slot * e + d) * h;
                let mut acc = 0.0;
                for j in 0..h {
                    g_w1[base + j] += x * s[j];
                    acc += w1[base + j] * s[j];
                }
                g_emb[tok * e + d] += acc;
            }
        }
        self.grad
    }
}

/// Direct evaluation without the projection table: embeds the window, applies both
/// layers and normalizes. Kept independent of [`Engine`] so each checks the other.
pub fn forward_direct(params: &PolicyParams, window: &[Token]) -> Vec<f64> {
    let c = &params.config;
    let (v, e, h) = (c.vocab_size, c.embed_dim, c.hidden_dim);
    let l = c.layout();
    let p = &params.values;
    let mut x = Vec::with_capacity(window.len() * e);
    for &tok in window {
        x.extend_from_slice(&p[l.emb.start + tok as usize * e..l.emb.start + (tok as usize + 1) * e]);
    }
    let mut logits = vec![0.0; v];
    let mut hidden = vec![0.0; h];
    for (j, hj) in hidden.iter_mut().enumerate() {
        let mut a = p[l.b1.start + j];
        for (i, xi) in x.iter().enumerate() {
            a += xi * p[l.w1.start + i * h + j];
        }
        *hj = a.tanh();
    }
    for (t, z) in logits.iter_mut().enumerate() {
        *z = p[l.b2.start + t] + hidden.iter().enumerate().map(|(j, hj)| hj * p[l.w2.start + j * v + t]).sum::<f64>();
    }
    log_softmax_in_place(&mut logits);
    logits
}
