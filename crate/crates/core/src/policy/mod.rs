//! Tiny autoregressive token policy: an MLP over the embeddings of the last
//! `context_window` tokens, with hand-derived gradients.

pub mod checkpoint;
mod engine;
pub mod gradcheck;
mod params;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use engine::{forward_direct, log_softmax_in_place, window_into, Accumulator, Activation, Engine};
pub use params::{GradVector, Layout, PolicyConfig, PolicyParams};

use crate::error::{Error, Result};
use crate::rng;
use crate::vocab::{self, Token};

/// A (prompt, response) supervision pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeqPair {
    pub prompt: Vec<Token>,
    pub response: Vec<Token>,
}

fn check_context(params: &PolicyParams, tokens: &[Token]) -> Result<()> {
    vocab::check_tokens(tokens, params.config.vocab_size)
}

/// `log p(· | context)` over the vocabulary.
pub fn forward_logprobs(params: &PolicyParams, context: &[Token]) -> Result<Vec<f64>> {
    check_context(params, context)?;
    let mut w = Vec::new();
    window_into(context, context.len(), params.config.context_window, &mut w);
    Ok(forward_direct(params, &w))
}

/// Entry `t` is `log p(response[t] | prompt ⊕ response[..t])`.
pub fn sequence_logprob(params: &PolicyParams, prompt: &[Token], response: &[Token]) -> Result<Vec<f64>> {
    if response.is_empty() {
        return Err(Error::input("empty response"));
    }
    check_context(params, prompt)?;
    check_context(params, response)?;
    let engine = Engine::new(params);
    Ok(engine
        .trajectory(prompt, response)
        .iter()
        .zip(response)
        .map(|(a, &y)| a.logp[y as usize])
        .collect())
}

/// Adds `weight ×` the gradient of the mean token NLL of `response` and returns that
/// (unweighted) mean NLL.
pub fn accumulate_nll(
    engine: &Engine,
    acc: Option<&mut Accumulator>,
    prompt: &[Token],
    response: &[Token],
    weight: f64,
) -> f64 {
    let traj = engine.trajectory(prompt, response);
    let t_len = response.len() as f64;
    let loss = -traj.iter().zip(response).map(|(a, &y)| a.logp[y as usize]).sum::<f64>() / t_len;
    if let Some(acc) = acc {
        let mut dz = vec![0.0; engine.params().config.vocab_size];
        for (a, &y) in traj.iter().zip(response) {
            for (d, p) in dz.iter_mut().zip(a.probs()) {
                *d = weight * p / t_len;
            }
            dz[y as usize] -= weight / t_len;
            acc.backward(engine, a, &dz);
        }
    }
    loss
}

/// Mean token NLL of `response` and its exact gradient.
pub fn grad_nll(params: &PolicyParams, prompt: &[Token], response: &[Token]) -> Result<(f64, GradVector)> {
    if response.is_empty() {
        return Err(Error::input("empty response"));
    }
    check_context(params, prompt)?;
    check_context(params, response)?;
    let engine = Engine::new(params);
    let mut acc = Accumulator::new(params);
    let loss = accumulate_nll(&engine, Some(&mut acc), prompt, response, 1.0);
    Ok((loss, acc.finish(params)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecodeMode {
    /// Argmax; ties resolve to the lowest token id.
    Greedy,
    Sample { temperature: f64, seed: u64 },
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

impl Engine<'_> {
    /// Generates up to `max_len` tokens, stopping after `[EOS]`.
    pub fn decode(&self, prompt: &[Token], mode: DecodeMode, max_len: usize) -> Vec<Token> {
        let mut seq = prompt.to_vec();
        let mut r = match mode {
            DecodeMode::Sample { seed, .. } => Some(rng::stream(seed, "decode", 0)),
            DecodeMode::Greedy => None,
        };
        let mut window = Vec::with_capacity(self.context_window());
        for _ in 0..max_len {
            window_into(&seq, seq.len(), self.context_window(), &mut window);
            let act = self.step(&window);
            let next = match (mode, r.as_mut()) {
                (DecodeMode::Sample { temperature, .. }, Some(r)) => sample(&act.logp, temperature, r),
                _ => argmax(&act.logp),
            } as Token;
            seq.push(next);
            if next == vocab::EOS {
                break;
            }
        }
        seq.split_off(prompt.len())
    }
}

fn sample(logp: &[f64], temperature: f64, r: &mut rng::Rng) -> usize {
    if temperature <= 0.0 {
        return argmax(logp);
    }
    let mut scaled: Vec<f64> = logp.iter().map(|l| l / temperature).collect();
    log_softmax_in_place(&mut scaled);
    let u: f64 = r.gen();
    let mut cum = 0.0;
    for (i, l) in scaled.iter().enumerate() {
        cum += l.exp();
        if u < cum {
            return i;
        }
    }
    argmax(logp)
}

pub fn decode(params: &PolicyParams, prompt: &[Token], mode: DecodeMode, max_len: usize) -> Result<Vec<Token>> {
    if max_len == 0 {
        return Err(Error::input("max_len must be at least 1"));
    }
    check_context(params, prompt)?;
    Ok(Engine::new(params).decode(prompt, mode, max_len))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::key("steps", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::key("batch_size", "must be at least 1"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::key("lr", format!("{} is not a positive step size", self.lr)));
        }
        Ok(())
    }
}

/// Epoch-wise shuffled mini-batches.
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: rng::Rng,
}

impl BatchSampler {
    pub fn new(n: usize, seed: u64, label: &str) -> Self {
        let mut s = BatchSampler {
            order: (0..n).collect(),
            pos: n,
            rng: rng::stream(seed, label, 0),
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        use rand::seq::SliceRandom;
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.reshuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Plain SGD: each step calls `objective(step, batch, params)` for a loss and
/// gradient and moves against the gradient. Returns the per-step losses.
pub fn run_sgd<F>(
    params: &mut PolicyParams,
    cfg: &TrainConfig,
    n_items: usize,
    label: &str,
    mut objective: F,
) -> Result<Vec<f64>>
where
    F: FnMut(usize, &[usize], &PolicyParams) -> Result<(f64, GradVector)>,
{
    cfg.validate()?;
    if n_items == 0 {
        return Err(Error::config(format!("{label}: no training items")));
    }
    let mut sampler = BatchSampler::new(n_items, cfg.seed, label);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = sampler.next_batch(cfg.batch_size.min(n_items));
        let (loss, grad) = objective(step, &batch, params)?;
        if !loss.is_finite() {
            return Err(Error::Training {
                step,
                message: format!("{label}: loss is {loss}"),
            });
        }
        if !grad.is_finite() {
            return Err(Error::Training {
                step,
                message: format!("{label}: non-finite gradient"),
            });
        }
        params.descend(&grad, cfg.lr);
        if !params.is_finite() {
            return Err(Error::Training {
                step,
                message: format!("{label}: parameters overflowed"),
            });
        }
        losses.push(loss);
    }
    Ok(losses)
}

/// Per-step losses plus a fixed probe-set loss before and after training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub losses: Vec<f64>,
    pub probe_start: f64,
    pub probe_end: f64,
}

/// Mean NLL over the first `limit` pairs.
pub fn probe_nll(params: &PolicyParams, pairs: &[SeqPair], limit: usize) -> f64 {
    let engine = Engine::new(params);
    let n = pairs.len().min(limit).max(1);
    pairs
        .iter()
        .take(n)
        .map(|p| accumulate_nll(&engine, None, &p.prompt, &p.response, 1.0))
        .sum::<f64>()
        / n as f64
}

pub(crate) const PROBE_SIZE: usize = 64;

/// Mini-batch SGD on mean token NLL over `pairs`, starting from `params`.
pub fn train_nll(params: &mut PolicyParams, pairs: &[SeqPair], cfg: &TrainConfig, label: &str) -> Result<TrainLog> {
    for p in pairs {
        if p.response.is_empty() {
            return Err(Error::input("empty response in training pair"));
        }
        check_context(params, &p.prompt)?;
        check_context(params, &p.response)?;
    }
    let probe_start = probe_nll(params, pairs, PROBE_SIZE);
    let losses = run_sgd(params, cfg, pairs.len(), label, |_, batch, params| {
        let engine = Engine::new(params);
        let mut acc = Accumulator::new(params);
        let w = 1.0 / batch.len() as f64;
        let loss = batch
            .iter()
            .map(|&i| w * accumulate_nll(&engine, Some(&mut acc), &pairs[i].prompt, &pairs[i].response, w))
            .sum();
        Ok((loss, acc.finish(params)))
    })?;
    Ok(TrainLog {
        losses,
        probe_start,
        probe_end: probe_nll(params, pairs, PROBE_SIZE),
    })
}

/// Builds the frozen reference policy from a seeded initialization.
pub fn pretrain_reference(config: PolicyConfig, pairs: &[SeqPair], cfg: &TrainConfig) -> Result<(PolicyParams, TrainLog)> {
    cfg.validate()?;
    let mut params = PolicyParams::init(config)?;
    let log = train_nll(&mut params, pairs, cfg, "pretrain")?;
    Ok((params, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(seed: u64) -> PolicyConfig {
        PolicyConfig {
            context_window: 6,
            embed_dim: 4,
            hidden_dim: 5,
            seed,
            ..Default::default()
        }
    }

    fn random_tokens(r: &mut rng::Rng, n: usize) -> Vec<Token> {
        (0..n).map(|_| r.gen_range(0..vocab::VOCAB_SIZE as Token)).collect()
    }

    #[test]
    fn softmax_normalizes() {
        let p = PolicyParams::init(PolicyConfig { seed: 3, ..Default::default() }).unwrap();
        let lp = forward_logprobs(&p, &[vocab::BEGIN, 7, 9]).unwrap();
        assert_eq!(lp.len(), 96);
        let s: f64 = lp.iter().map(|l| l.exp()).sum();
        assert!((s - 1.0).abs() < 1e-9);
        assert_eq!(lp, forward_logprobs(&p, &[vocab::BEGIN, 7, 9]).unwrap());
    }

    #[test]
    fn zero_params_are_uniform() {
        let p = PolicyParams::zeros(PolicyConfig::default()).unwrap();
        let lp = forward_logprobs(&p, &[5, 6]).unwrap();
        assert!(lp.iter().all(|l| (l + (96f64).ln()).abs() < 1e-12));
        let seq = sequence_logprob(&p, &[1, 2], &[5, 6, 7]).unwrap();
        assert!(seq.iter().all(|l| (l + (96f64).ln()).abs() < 1e-12));
        let (loss, _) = grad_nll(&p, &[1, 2], &[5, 6, 7]).unwrap();
        assert!((loss - (96f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn out_of_vocab_and_empty_rejected() {
        let p = PolicyParams::zeros(PolicyConfig::default()).unwrap();
        assert!(matches!(forward_logprobs(&p, &[200]), Err(Error::Input(_))));
        assert!(matches!(sequence_logprob(&p, &[1], &[]), Err(Error::Input(_))));
        assert!(matches!(grad_nll(&p, &[1], &[]), Err(Error::Input(_))));
        assert!(decode(&p, &[1], DecodeMode::Greedy, 0).is_err());
    }

    #[test]
    fn engine_matches_direct_forward() {
        let mut r = rng::seeded(8);
        let p = PolicyParams::init(PolicyConfig { seed: 8, ..Default::default() }).unwrap();
        let engine = Engine::new(&p);
        for _ in 0..20 {
            let n = r.gen_range(1..130);
            let ctx = random_tokens(&mut r, n);
            let a = engine.step_at(&ctx, ctx.len());
            let b = forward_logprobs(&p, &ctx).unwrap();
            for (x, y) in a.logp.iter().zip(&b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sequence_logprob_matches_stepwise_lookups() {
        let mut r = rng::seeded(9);
        for case in 0..50 {
            let p = PolicyParams::init(small_config(case)).unwrap();
            let (np, nr) = (r.gen_range(0..8), r.gen_range(1..6));
            let prompt = random_tokens(&mut r, np);
            let resp = random_tokens(&mut r, nr);
            let seq = sequence_logprob(&p, &prompt, &resp).unwrap();
            for t in 0..resp.len() {
                let mut ctx = prompt.clone();
                ctx.extend_from_slice(&resp[..t]);
                let lp = forward_logprobs(&p, &ctx).unwrap();
                assert!((seq[t] - lp[resp[t] as usize]).abs() < 1e-12);
                assert!(seq[t] <= 0.0);
            }
            let prod: f64 = seq.iter().map(|l| l.exp()).product();
            assert!((seq.iter().sum::<f64>() - prod.ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn grad_nll_matches_finite_differences() {
        let mut r = rng::seeded(10);
        for case in 0..5 {
            let p = PolicyParams::init(small_config(100 + case)).unwrap();
            let prompt = random_tokens(&mut r, 7);
            let resp = random_tokens(&mut r, 4);
            let (_, g) = grad_nll(&p, &prompt, &resp).unwrap();
            let report = gradcheck::check(&p, &g, 20, 1e-5, case, |q| grad_nll(q, &prompt, &resp).unwrap().0);
            assert!(report.max_rel_err <= 1e-4, "{report:?}");
        }
    }

    #[test]
    fn output_bias_shift_direction_has_zero_gradient() {
        let p = PolicyParams::init(PolicyConfig { seed: 2, ..Default::default() }).unwrap();
        let (_, g) = grad_nll(&p, &[1, 10, 11], &[12, 13, vocab::EOS]).unwrap();
        let along: f64 = g.values[p.config.layout().b2].iter().sum();
        assert!(along.abs() < 1e-12);
    }

    #[test]
    fn greedy_decode_deterministic_and_bias_shift_invariant() {
        let mut p = PolicyParams::init(PolicyConfig { seed: 6, ..Default::default() }).unwrap();
        let prompt = [vocab::BEGIN, 20, 21, vocab::ASK];
        let a = decode(&p, &prompt, DecodeMode::Greedy, 12).unwrap();
        assert_eq!(a, decode(&p, &prompt, DecodeMode::Greedy, 12).unwrap());
        assert_eq!(decode(&p, &prompt, DecodeMode::Greedy, 1).unwrap().len(), 1);
        let b2 = p.config.layout().b2;
        p.values[b2].iter_mut().for_each(|v| *v += 0.75);
        assert_eq!(a, decode(&p, &prompt, DecodeMode::Greedy, 12).unwrap());
    }

    #[test]
    fn cold_sampling_converges_to_greedy() {
        let p = PolicyParams::init(PolicyConfig { seed: 12, ..Default::default() }).unwrap();
        let prompt = [vocab::BEGIN, 30, 31, vocab::ASK];
        let greedy = decode(&p, &prompt, DecodeMode::Greedy, 10).unwrap();
        for seed in 0..20 {
            let s = decode(&p, &prompt, DecodeMode::Sample { temperature: 1e-4, seed }, 10).unwrap();
            assert_eq!(s, greedy);
        }
        let a = decode(&p, &prompt, DecodeMode::Sample { temperature: 1.0, seed: 1 }, 10).unwrap();
        assert_eq!(a, decode(&p, &prompt, DecodeMode::Sample { temperature: 1.0, seed: 1 }, 10).unwrap());
    }

    #[test]
    fn greedy_ties_pick_lowest_id() {
        let p = PolicyParams::zeros(PolicyConfig::default()).unwrap();
        assert_eq!(decode(&p, &[1], DecodeMode::Greedy, 3).unwrap(), vec![0, 0, 0]);
    }

    fn toy_pairs() -> Vec<SeqPair> {
        (0..16)
            .map(|i| SeqPair {
                prompt: vec![vocab::BEGIN, 5 + (i % 10) as Token, vocab::ASK],
                response: vec![5 + (i % 10) as Token, vocab::EOS],
            })
            .collect()
    }

    #[test]
    fn pretraining_reduces_loss_and_is_reproducible() {
        let cfg = TrainConfig { steps: 60, lr: 0.05, batch_size: 8, seed: 1 };
        let pc = small_config(4);
        let (a, log) = pretrain_reference(pc, &toy_pairs(), &cfg).unwrap();
        assert!(log.probe_end < log.probe_start);
        let (b, _) = pretrain_reference(pc, &toy_pairs(), &cfg).unwrap();
        assert_eq!(a, b);
        let zero = TrainConfig { steps: 0, ..cfg };
        assert!(pretrain_reference(pc, &toy_pairs(), &zero).is_err());
    }

    #[test]
    fn divergence_reports_step() {
        let cfg = TrainConfig { steps: 5, lr: 1e300, batch_size: 4, seed: 1 };
        let err = pretrain_reference(small_config(1), &toy_pairs(), &cfg).unwrap_err();
        assert!(matches!(err, Error::Training { .. }), "{err}");
        let mut p = PolicyParams::init(small_config(1)).unwrap();
        let cfg = TrainConfig { steps: 5, lr: 0.1, batch_size: 2, seed: 1 };
        let err = run_sgd(&mut p, &cfg, 4, "nan", |step, _, q| {
            let loss = if step == 3 { f64::NAN } else { 1.0 };
            Ok((loss, GradVector::zeros(q.len())))
        })
        .unwrap_err();
        assert!(matches!(err, Error::Training { step: 3, .. }), "{err}");
    }

    #[test]
    fn softmax_stays_normalized_through_training() {
        let pc = small_config(7);
        let mut p = PolicyParams::init(pc).unwrap();
        let pairs = toy_pairs();
        for step in 0..10 {
            let cfg = TrainConfig { steps: 1, lr: 0.05, batch_size: 4, seed: step };
            train_nll(&mut p, &pairs, &cfg, "t").unwrap();
            let lp = forward_logprobs(&p, &pairs[0].prompt).unwrap();
            assert!((lp.iter().map(|l| l.exp()).sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
