//! Token-wise preference optimization against a frozen reference policy.
//!
//! ```text
//! Δ_t(θ)  = log p_θ(y⁺_t | x, y⁺_<t) − log p_θ(y⁻_t | x, y⁻_<t)
//! L_pref  = −(1/T) Σ_t w_t log σ(β (Δ_t(θ) − κ Δ_ref_t))
//! L_kl    = (1/T⁺) Σ KL(p_θ ‖ p_ref)|y⁺ + (1/T⁻) Σ KL(p_θ ‖ p_ref)|y⁻
//! L_rl    = L_pref + λ_KL L_kl
//! ```

mod build;

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use build::{build_preferences, passes_all, BuildConfig, PreferenceSource, SkipReport, Validator, WeightMode};

use crate::error::{Error, Result};
use crate::policy::{run_sgd, Accumulator, Activation, Engine, GradVector, PolicyParams, TrainConfig};
use crate::vocab::{self, Token};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    RefinedVsCandidate,
    CandidateVsCandidate,
    Validator,
    /// Every sampled candidate matched `y⁺`; `y⁻` is a corrupted copy.
    Corruption,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub doc_id: String,
    pub prompt: Vec<Token>,
    pub y_plus: Vec<Token>,
    pub y_minus: Vec<Token>,
    pub token_weights: Vec<f64>,
    pub provenance: Provenance,
}

impl PreferencePair {
    /// `min(|y⁺|, |y⁻|)`.
    pub fn t_eff(&self) -> usize {
        self.y_plus.len().min(self.y_minus.len())
    }

    pub fn validate(&self) -> Result<()> {
        if self.y_plus.is_empty() || self.y_minus.is_empty() {
            return Err(Error::input(format!("{}: empty response in preference pair", self.doc_id)));
        }
        if self.y_plus == self.y_minus {
            return Err(Error::structural(format!("{}: y+ equals y-", self.doc_id)));
        }
        if self.token_weights.len() != self.t_eff() {
            return Err(Error::structural(format!(
                "{}: {} token weights for effective length {}",
                self.doc_id,
                self.token_weights.len(),
                self.t_eff()
            )));
        }
        if let Some(w) = self.token_weights.iter().find(|w| !(0.0..=1.0).contains(*w)) {
            return Err(Error::structural(format!("{}: token weight {w} outside [0, 1]", self.doc_id)));
        }
        for s in [&self.prompt, &self.y_plus, &self.y_minus] {
            vocab::check_tokens(s, vocab::VOCAB_SIZE)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// One sigmoid per token, weighted by `w_t`.
    Token,
    /// Gaps summed before a single sigmoid, weighted by the mean of `w_t`.
    Sequence,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    pub beta_pref: f64,
    pub kappa: f64,
    pub lambda_kl: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub aggregation: Aggregation,
    /// Leave the token-embedding table untouched during training.
    pub freeze_embeddings: bool,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            beta_pref: 1.0,
            kappa: 0.5,
            lambda_kl: 0.1,
            steps: 300,
            batch_size: 8,
            lr: 0.01,
            seed: 0,
            aggregation: Aggregation::Token,
            freeze_embeddings: false,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_pref.is_finite() && self.beta_pref > 0.0) {
            return Err(Error::key("beta_pref", format!("{} must be positive", self.beta_pref)));
        }
        if !(self.kappa.is_finite() && self.kappa >= 0.0) {
            return Err(Error::key("kappa", format!("{} must be non-negative", self.kappa)));
        }
        if !(self.lambda_kl.is_finite() && self.lambda_kl >= 0.0) {
            return Err(Error::key("lambda_kl", format!("{} must be non-negative", self.lambda_kl)));
        }
        self.train_config().validate()
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            lr: self.lr,
            batch_size: self.batch_size,
            seed: self.seed,
        }
    }
}

/// `log σ(x)` without overflow.
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// `σ(−x) = 1 − σ(x)`.
fn sigmoid_neg(x: f64) -> f64 {
    if x >= 0.0 {
        let e = (-x).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + x.exp())
    }
}

/// Reference-policy quantities of a pair; constant during training.
#[derive(Debug, Clone, PartialEq)]
pub struct RefCache {
    pub gaps: Vec<f64>,
    pub logp_plus: Vec<Vec<f64>>,
    pub logp_minus: Vec<Vec<f64>>,
}

impl RefCache {
    pub fn new(reference: &Engine, pair: &PreferencePair) -> Self {
        let plus = reference.trajectory(&pair.prompt, &pair.y_plus);
        let minus = reference.trajectory(&pair.prompt, &pair.y_minus);
        let gaps = (0..pair.t_eff())
            .map(|t| plus[t].logp[pair.y_plus[t] as usize] - minus[t].logp[pair.y_minus[t] as usize])
            .collect();
        RefCache {
            gaps,
            logp_plus: plus.into_iter().map(|a| a.logp).collect(),
            logp_minus: minus.into_iter().map(|a| a.logp).collect(),
        }
    }
}

fn check_pairs(pairs: &[PreferencePair]) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::input("no preference pairs"));
    }
    pairs.iter().try_for_each(PreferencePair::validate)
}

/// `(Δ_t(θ), Δ_ref_t)` for `t < T_eff`.
pub fn token_gaps(params: &PolicyParams, reference: &PolicyParams, pair: &PreferencePair) -> Result<(Vec<f64>, Vec<f64>)> {
    pair.validate()?;
    let cache = RefCache::new(&Engine::new(reference), pair);
    let own = RefCache::new(&Engine::new(params), pair);
    Ok((own.gaps, cache.gaps))
}

/// Per-pair loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PairTerms {
    pub pref: f64,
    pub kl: f64,
    pub mean_gap: f64,
}

/// Adds `∂KL(p_θ ‖ p_ref)/∂z · scale` for one position and returns the KL.
fn kl_position(act: &Activation, ref_logp: &[f64], scale: f64, dz: &mut [f64]) -> f64 {
    let kl: f64 = act.logp.iter().zip(ref_logp).map(|(l, r)| l.exp() * (l - r)).sum();
    for ((d, l), r) in dz.iter_mut().zip(&act.logp).zip(ref_logp) {
        *d += scale * l.exp() * ((l - r) - kl);
    }
    kl
}

/// Loss terms of one pair, back-propagating `pref_weight·L_pref + kl_weight·L_kl`.
fn accumulate_pair(
    engine: &Engine,
    mut acc: Option<&mut Accumulator>,
    pair: &PreferencePair,
    cache: &RefCache,
    cfg: &GrpoConfig,
    pref_weight: f64,
    kl_weight: f64,
) -> PairTerms {
    let plus = engine.trajectory(&pair.prompt, &pair.y_plus);
    let minus = engine.trajectory(&pair.prompt, &pair.y_minus);
    let t_eff = pair.t_eff();
    let gaps: Vec<f64> = (0..t_eff)
        .map(|t| plus[t].logp[pair.y_plus[t] as usize] - minus[t].logp[pair.y_minus[t] as usize])
        .collect();
    let (beta, kappa) = (cfg.beta_pref, cfg.kappa);

    // dL/dΔ_t for each position.
    let mut coef = vec![0.0; t_eff];
    let pref = match cfg.aggregation {
        Aggregation::Token => {
            let t = t_eff as f64;
            let mut l = 0.0;
            for i in 0..t_eff {
                let w = pair.token_weights[i];
                if w == 0.0 {
                    continue;
                }
                let u = beta * (gaps[i] - kappa * cache.gaps[i]);
                l -= w * log_sigmoid(u) / t;
                coef[i] = -w * beta * sigmoid_neg(u) / t;
            }
            l
        }
        Aggregation::Sequence => {
            let w = pair.token_weights.iter().sum::<f64>() / t_eff as f64;
            let u = beta * (0..t_eff).map(|i| gaps[i] - kappa * cache.gaps[i]).sum::<f64>();
            if w == 0.0 {
                0.0
            } else {
                coef.iter_mut().for_each(|c| *c = -w * beta * sigmoid_neg(u));
                -w * log_sigmoid(u)
            }
        }
    };

    let v = engine.params().config.vocab_size;
    let mut kl = 0.0;
    let mut dz = vec![0.0; v];
    for (traj, ys, ref_logp, sign) in [
        (&plus, &pair.y_plus, &cache.logp_plus, 1.0),
        (&minus, &pair.y_minus, &cache.logp_minus, -1.0),
    ] {
        let t_len = traj.len() as f64;
        for (t, act) in traj.iter().enumerate() {
            dz.iter_mut().for_each(|d| *d = 0.0);
            kl += kl_position(act, &ref_logp[t], kl_weight / t_len, &mut dz) / t_len;
            if t < t_eff && coef[t] != 0.0 {
                // ∂ log p(y)/∂z = e_y − p
                let c = sign * pref_weight * coef[t];
                for (d, l) in dz.iter_mut().zip(&act.logp) {
                    *d -= c * l.exp();
                }
                dz[ys[t] as usize] += c;
            }
            if let Some(acc) = acc.as_deref_mut() {
                acc.backward(engine, act, &dz);
            }
        }
    }
    PairTerms {
        pref,
        kl,
        mean_gap: if t_eff == 0 { 0.0 } else { gaps.iter().sum::<f64>() / t_eff as f64 },
    }
}

fn objective(
    params: &PolicyParams,
    reference: &PolicyParams,
    pairs: &[PreferencePair],
    cfg: &GrpoConfig,
    pref_weight: f64,
    kl_weight: f64,
) -> Result<(PairTerms, GradVector)> {
    check_pairs(pairs)?;
    let engine = Engine::new(params);
    let ref_engine = Engine::new(reference);
    let mut acc = Accumulator::new(params);
    let n = pairs.len() as f64;
    let mut sum = PairTerms::default();
    for p in pairs {
        let cache = RefCache::new(&ref_engine, p);
        let t = accumulate_pair(&engine, Some(&mut acc), p, &cache, cfg, pref_weight / n, kl_weight / n);
        sum.pref += t.pref / n;
        sum.kl += t.kl / n;
        sum.mean_gap += t.mean_gap / n;
    }
    Ok((sum, acc.finish(params)))
}

/// Mean over pairs of the token-wise preference loss.
pub fn tok_grpo_loss(
    params: &PolicyParams,
    reference: &PolicyParams,
    pairs: &[PreferencePair],
    cfg: &GrpoConfig,
) -> Result<(f64, GradVector)> {
    let (t, g) = objective(params, reference, pairs, cfg, 1.0, 0.0)?;
    Ok((t.pref, g))
}

/// Mean over pairs of the symmetric token-averaged `KL(p_θ ‖ p_ref)`.
pub fn kl_stabilization(params: &PolicyParams, reference: &PolicyParams, pairs: &[PreferencePair]) -> Result<(f64, GradVector)> {
    let (t, g) = objective(params, reference, pairs, &GrpoConfig::default(), 0.0, 1.0)?;
    Ok((t.kl, g))
}

/// `L_pref + λ_KL · L_kl`.
pub fn rl_objective(
    params: &PolicyParams,
    reference: &PolicyParams,
    pairs: &[PreferencePair],
    cfg: &GrpoConfig,
) -> Result<(f64, GradVector)> {
    cfg.validate()?;
    let (t, g) = objective(params, reference, pairs, cfg, 1.0, cfg.lambda_kl)?;
    Ok((t.pref + cfg.lambda_kl * t.kl, g))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RlRecord {
    pub step: usize,
    pub loss: f64,
    pub l_pref: f64,
    pub l_kl: f64,
    pub mean_gap: f64,
}

pub fn write_rl_csv(path: &Path, rows: &[RlRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,loss,l_pref,l_kl,mean_gap")?;
    for r in rows {
        writeln!(f, "{},{},{},{},{}", r.step, r.loss, r.l_pref, r.l_kl, r.mean_gap)?;
    }
    f.flush()?;
    Ok(())
}

/// Seeded mini-batch SGD on [`rl_objective`]. Reference quantities are computed
/// once up front.
pub fn rl_train(
    initial: &PolicyParams,
    reference: &PolicyParams,
    pairs: &[PreferencePair],
    cfg: &GrpoConfig,
) -> Result<(PolicyParams, Vec<RlRecord>)> {
    cfg.validate()?;
    check_pairs(pairs)?;
    if initial.config.layout() != reference.config.layout() {
        return Err(Error::structural("policy and reference shapes differ"));
    }
    let ref_engine = Engine::new(reference);
    let caches: Vec<RefCache> = pairs.iter().map(|p| RefCache::new(&ref_engine, p)).collect();
    let emb = initial.config.layout().emb;
    let mut params = initial.clone();
    let mut log = Vec::with_capacity(cfg.steps);
    run_sgd(&mut params, &cfg.train_config(), pairs.len(), "rl", |step, batch, p| {
        let engine = Engine::new(p);
        let mut acc = Accumulator::new(p);
        let n = batch.len() as f64;
        let mut rec = RlRecord {
            step,
            ..Default::default()
        };
        for &i in batch {
            let t = accumulate_pair(&engine, Some(&mut acc), &pairs[i], &caches[i], cfg, 1.0 / n, cfg.lambda_kl / n);
            rec.l_pref += t.pref / n;
            rec.l_kl += t.kl / n;
            rec.mean_gap += t.mean_gap / n;
        }
        rec.loss = rec.l_pref + cfg.lambda_kl * rec.l_kl;
        let mut grad = acc.finish(p);
        if cfg.freeze_embeddings {
            grad.zero_range(emb.clone());
        }
        log.push(rec);
        Ok((rec.loss, grad))
    })?;
    Ok((params, log))
}

/// Mean `Δ_t(θ)` over all pairs and positions `t < T_eff`.
pub fn mean_gap(params: &PolicyParams, pairs: &[PreferencePair]) -> Result<f64> {
    check_pairs(pairs)?;
    let engine = Engine::new(params);
    let mut sum = 0.0;
    let mut count = 0usize;
    for p in pairs {
        let g = RefCache::new(&engine, p).gaps;
        sum += g.iter().sum::<f64>();
        count += g.len();
    }
    Ok(sum / count.max(1) as f64)
}

#[cfg(test)]
mod tests;
