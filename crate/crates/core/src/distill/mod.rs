//! Correction-distillation objectives for the annotation refiner.
//!
//! ```text
//! L_total = α·L_kd + β_kd·L_cls + γ·L_seq + δ·L_align + ε·(L_sp + L_klp)
//! ```
//!
//! `L_align` compares table-cell geometry of parsed annotations and carries no
//! policy gradient; everything else is differentiated exactly.

mod align;

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use align::{align_loss, cells, match_cells, AlignWeights};

use crate::error::{Error, Result};
use crate::policy::{
    accumulate_nll, grad_nll, log_softmax_in_place, Accumulator, Activation, Engine, GradVector, PolicyParams,
    SeqPair,
};
use crate::synthdoc::{linearize, FieldAnnotation, PseudoLabelSet, Schema};
use crate::vocab::{self, Token};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    /// KD temperature.
    pub tau: f64,
    /// Teacher positions below this confidence are ignored by the KD term.
    pub conf_threshold: f64,
    /// Mass spread uniformly over the vocabulary when building teacher distributions.
    pub label_smoothing: f64,
    pub alpha: f64,
    pub beta_kd: f64,
    pub gamma: f64,
    pub delta: f64,
    pub epsilon: f64,
    /// Per-parameter L_sp weights; `None` means `1/P` everywhere.
    pub sp_weights: Option<Vec<f64>>,
    pub align: AlignWeights,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            tau: 2.0,
            conf_threshold: 0.7,
            label_smoothing: 0.1,
            alpha: 1.0,
            beta_kd: 0.5,
            gamma: 1.0,
            delta: 0.25,
            epsilon: 0.1,
            sp_weights: None,
            align: AlignWeights::default(),
        }
    }
}

fn non_negative(key: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::key(key, format!("{v} must be a finite non-negative number")))
    }
}

fn unit(key: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::key(key, format!("{v} is outside [0, 1]")))
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::key("tau", format!("{} must be positive", self.tau)));
        }
        unit("conf_threshold", self.conf_threshold)?;
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::key("label_smoothing", format!("{} is outside [0, 1)", self.label_smoothing)));
        }
        for (k, v) in [
            ("alpha", self.alpha),
            ("beta_kd", self.beta_kd),
            ("gamma", self.gamma),
            ("delta", self.delta),
            ("epsilon", self.epsilon),
            ("align_l1", self.align.l1),
            ("align_iou", self.align.iou),
            ("align_cls", self.align.cls),
        ] {
            non_negative(k, v)?;
        }
        if let Some(w) = &self.sp_weights {
            if let Some(bad) = w.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
                return Err(Error::key("sp_weights", format!("weight {bad} is negative or non-finite")));
            }
        }
        Ok(())
    }

    /// Also checks that `sp_weights` covers exactly `param_count` parameters.
    pub fn validate_for(&self, param_count: usize) -> Result<()> {
        self.validate()?;
        match &self.sp_weights {
            Some(w) if w.len() != param_count => Err(Error::key(
                "sp_weights",
                format!("{} weights for {param_count} parameters", w.len()),
            )),
            _ => Ok(()),
        }
    }
}

/// Per-position teacher distributions for one response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherSequence {
    pub dists: Vec<Vec<f64>>,
    pub confidence: Vec<f64>,
}

impl TeacherSequence {
    /// Label-smoothed one-hot distributions at `tokens`.
    pub fn from_tokens(tokens: &[Token], confidence: &[f64], smoothing: f64) -> Result<Self> {
        if tokens.len() != confidence.len() {
            return Err(Error::structural(format!(
                "{} teacher tokens with {} confidences",
                tokens.len(),
                confidence.len()
            )));
        }
        vocab::check_tokens(tokens, vocab::VOCAB_SIZE)?;
        let floor = smoothing / vocab::VOCAB_SIZE as f64;
        let dists = tokens
            .iter()
            .map(|&t| {
                let mut d = vec![floor; vocab::VOCAB_SIZE];
                d[t as usize] += 1.0 - smoothing;
                d
            })
            .collect();
        let seq = TeacherSequence {
            dists,
            confidence: confidence.to_vec(),
        };
        seq.validate()?;
        Ok(seq)
    }

    /// Teacher over the linearized pseudo labels. Key markers and `[EOS]` are
    /// structural and always carry confidence 1.
    pub fn from_pseudo(schema: &Schema, pseudo: &PseudoLabelSet, smoothing: f64) -> Result<Self> {
        pseudo.validate(schema)?;
        let tokens = linearize(schema, &pseudo.annotations)?;
        let mut confidence = Vec::with_capacity(tokens.len());
        for i in 0..schema.len() {
            confidence.push(1.0);
            confidence.extend_from_slice(pseudo.field_agreement(i));
        }
        confidence.push(1.0);
        Self::from_tokens(&tokens, &confidence, smoothing)
    }

    pub fn len(&self) -> usize {
        self.dists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dists.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dists.len() != self.confidence.len() {
            return Err(Error::structural("teacher distributions and confidences differ in length"));
        }
        for (t, d) in self.dists.iter().enumerate() {
            let s: f64 = d.iter().sum();
            if d.len() != vocab::VOCAB_SIZE || (s - 1.0).abs() > 1e-9 || d.iter().any(|p| *p < 0.0) {
                return Err(Error::structural(format!("teacher position {t} is not a distribution")));
            }
        }
        if let Some(c) = self.confidence.iter().find(|c| !(0.0..=1.0).contains(*c)) {
            return Err(Error::structural(format!("teacher confidence {c} outside [0, 1]")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TeacherBatch {
    pub seqs: Vec<TeacherSequence>,
}

/// General-purpose pairs used to keep the refiner close to its initialization.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReplayBuffer {
    pub pairs: Vec<SeqPair>,
}

fn check_batch(params: &PolicyParams, batch: &[SeqPair]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::input("empty batch"));
    }
    for p in batch {
        if p.response.is_empty() {
            return Err(Error::input("empty response"));
        }
        vocab::check_tokens(&p.prompt, params.config.vocab_size)?;
        vocab::check_tokens(&p.response, params.config.vocab_size)?;
    }
    Ok(())
}

fn tempered(logp: &[f64], tau: f64) -> Vec<f64> {
    let mut s: Vec<f64> = logp.iter().map(|l| l / tau).collect();
    log_softmax_in_place(&mut s);
    s
}

/// Per-position KD term `τ²·KL(p_T^τ ‖ p_θ^τ)` and its logit gradient `τ(q_θ − q_T)`,
/// or `None` when the position is gated out.
fn kd_position(act: &Activation, teacher: &[f64], conf: f64, cfg: &DistillConfig) -> Option<(f64, Vec<f64>)> {
    if conf < cfg.conf_threshold {
        return None;
    }
    let tau = cfg.tau;
    let log_t: Vec<f64> = teacher.iter().map(|p| p.ln()).collect();
    let lq_t = tempered(&log_t, tau);
    let lq_s = tempered(&act.logp, tau);
    let mut kl = 0.0;
    let mut dz = Vec::with_capacity(lq_s.len());
    for (lt, ls) in lq_t.iter().zip(&lq_s) {
        let qt = lt.exp();
        if qt > 0.0 {
            kl += qt * (lt - ls);
        }
        dz.push(tau * (ls.exp() - qt));
    }
    Some((tau * tau * kl, dz))
}

fn accumulate_kd(
    engine: &Engine,
    mut acc: Option<&mut Accumulator>,
    traj: &[Activation],
    teacher: &TeacherSequence,
    cfg: &DistillConfig,
    weight: f64,
) -> f64 {
    let t_len = traj.len() as f64;
    let mut loss = 0.0;
    for (t, act) in traj.iter().enumerate() {
        if let Some((l, mut dz)) = kd_position(act, &teacher.dists[t], teacher.confidence[t], cfg) {
            loss += l / t_len;
            if let Some(acc) = acc.as_deref_mut() {
                dz.iter_mut().for_each(|d| *d *= weight / t_len);
                acc.backward(engine, act, &dz);
            }
        }
    }
    loss
}

fn check_teacher(teacher: &TeacherBatch, batch: &[SeqPair]) -> Result<()> {
    if teacher.seqs.len() != batch.len() {
        return Err(Error::structural(format!(
            "{} teacher sequences for {} samples",
            teacher.seqs.len(),
            batch.len()
        )));
    }
    for (i, (t, p)) in teacher.seqs.iter().zip(batch).enumerate() {
        if t.len() != p.response.len() {
            return Err(Error::structural(format!(
                "sample {i}: {} teacher positions for a {}-token response",
                t.len(),
                p.response.len()
            )));
        }
        t.validate()?;
    }
    Ok(())
}

/// Mean over samples of `(1/T) Σ_t τ²·KL(p_T^τ ‖ p_θ^τ)` over confident positions.
pub fn kd_loss(
    student: &PolicyParams,
    teacher: &TeacherBatch,
    batch: &[SeqPair],
    cfg: &DistillConfig,
) -> Result<(f64, GradVector)> {
    cfg.validate()?;
    check_batch(student, batch)?;
    check_teacher(teacher, batch)?;
    let engine = Engine::new(student);
    let mut acc = Accumulator::new(student);
    let n = batch.len() as f64;
    let mut loss = 0.0;
    for (p, t) in batch.iter().zip(&teacher.seqs) {
        let traj = engine.trajectory(&p.prompt, &p.response);
        loss += accumulate_kd(&engine, Some(&mut acc), &traj, t, cfg, 1.0 / n) / n;
    }
    Ok((loss, acc.finish(student)))
}

/// One-step classification query: the context ends in `[ASK]`, which never occurs
/// inside a response, and the label is a kind marker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClsExample {
    pub context: Vec<Token>,
    pub label: Token,
}

/// `prompt ⊕ key_marker ⊕ value ⊕ [ASK] → kind marker`, one example per field.
pub fn cls_examples(schema: &Schema, prompt: &[Token], annotations: &[FieldAnnotation]) -> Result<Vec<ClsExample>> {
    crate::synthdoc::check_keys(schema, annotations, "classification")?;
    Ok(annotations
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let mut context = prompt.to_vec();
            context.push(vocab::key_marker(i));
            context.extend_from_slice(&a.value);
            context.push(vocab::ASK);
            ClsExample {
                context,
                label: a.kind.marker(),
            }
        })
        .collect())
}

fn accumulate_cls(engine: &Engine, acc: Option<&mut Accumulator>, ex: &ClsExample, weight: f64) -> f64 {
    let act = engine.step_at(&ex.context, ex.context.len());
    let loss = -act.logp[ex.label as usize];
    if let Some(acc) = acc {
        let mut dz: Vec<f64> = act.probs().map(|p| weight * p).collect();
        dz[ex.label as usize] -= weight;
        acc.backward(engine, &act, &dz);
    }
    loss
}

/// `−mean log p_θ(kind marker | context)`.
pub fn cls_loss(student: &PolicyParams, examples: &[ClsExample]) -> Result<(f64, GradVector)> {
    if examples.is_empty() {
        return Err(Error::input("no classification examples"));
    }
    for ex in examples {
        if !vocab::is_kind_marker(ex.label) {
            return Err(Error::input(format!("label {} is not a field-kind marker", ex.label)));
        }
        vocab::check_tokens(&ex.context, student.config.vocab_size)?;
    }
    let engine = Engine::new(student);
    let mut acc = Accumulator::new(student);
    let n = examples.len() as f64;
    let loss = examples
        .iter()
        .map(|ex| accumulate_cls(&engine, Some(&mut acc), ex, 1.0 / n))
        .sum::<f64>()
        / n;
    Ok((loss, acc.finish(student)))
}

/// Batch mean of the per-sample token NLL.
pub fn seq_loss(student: &PolicyParams, batch: &[SeqPair]) -> Result<(f64, GradVector)> {
    check_batch(student, batch)?;
    if let [one] = batch {
        return grad_nll(student, &one.prompt, &one.response);
    }
    let engine = Engine::new(student);
    let mut acc = Accumulator::new(student);
    let n = batch.len() as f64;
    let loss = batch
        .iter()
        .map(|p| accumulate_nll(&engine, Some(&mut acc), &p.prompt, &p.response, 1.0 / n))
        .sum::<f64>()
        / n;
    Ok((loss, acc.finish(student)))
}

/// `Σ_p w_p (θ_p − θ0_p)²` with gradient `2 w_p (θ_p − θ0_p)`. Without explicit
/// weights every `w_p` is `1/P`, i.e. the mean squared drift.
pub fn sp_reg(params: &PolicyParams, reference: &PolicyParams, weights: Option<&[f64]>) -> Result<(f64, GradVector)> {
    if params.len() != reference.len() {
        return Err(Error::structural(format!(
            "{} parameters against a {}-parameter reference",
            params.len(),
            reference.len()
        )));
    }
    if let Some(w) = weights {
        if w.len() != params.len() {
            return Err(Error::structural(format!("{} weights for {} parameters", w.len(), params.len())));
        }
    }
    let mut grad = GradVector::zeros(params.len());
    let mut loss = 0.0;
    let uniform = 1.0 / params.len() as f64;
    for (i, (a, b)) in params.values.iter().zip(&reference.values).enumerate() {
        let w = weights.map_or(uniform, |w| w[i]);
        let d = a - b;
        loss += w * d * d;
        grad.values[i] = 2.0 * w * d;
    }
    Ok((loss, grad))
}

/// Token-mean `KL(p_ref ‖ p_θ)` over one pair; the logit gradient is `p_θ − p_ref`.
fn accumulate_klp(engine: &Engine, reference: &Engine, acc: Option<&mut Accumulator>, pair: &SeqPair, weight: f64) -> f64 {
    let traj = engine.trajectory(&pair.prompt, &pair.response);
    let rtraj = reference.trajectory(&pair.prompt, &pair.response);
    let t_len = traj.len() as f64;
    let mut loss = 0.0;
    let mut acc = acc;
    for (a, r) in traj.iter().zip(&rtraj) {
        loss += r.logp.iter().zip(&a.logp).map(|(lr, ls)| lr.exp() * (lr - ls)).sum::<f64>() / t_len;
        if let Some(acc) = acc.as_deref_mut() {
            let dz: Vec<f64> = a
                .logp
                .iter()
                .zip(&r.logp)
                .map(|(ls, lr)| weight * (ls.exp() - lr.exp()) / t_len)
                .collect();
            acc.backward(engine, a, &dz);
        }
    }
    loss
}

/// Mean over the replay buffer of the token-averaged `KL(p_θ0 ‖ p_θ)`.
pub fn klp_loss(params: &PolicyParams, reference: &PolicyParams, replay: &ReplayBuffer) -> Result<(f64, GradVector)> {
    if replay.pairs.is_empty() {
        return Err(Error::config("logit preservation needs a non-empty replay buffer"));
    }
    if params.config.layout() != reference.config.layout() {
        return Err(Error::structural("student and reference configurations differ"));
    }
    check_batch(params, &replay.pairs)?;
    let engine = Engine::new(params);
    let ref_engine = Engine::new(reference);
    let mut acc = Accumulator::new(params);
    let n = replay.pairs.len() as f64;
    let loss = replay
        .pairs
        .iter()
        .map(|p| accumulate_klp(&engine, &ref_engine, Some(&mut acc), p, 1.0 / n))
        .sum::<f64>()
        / n;
    Ok((loss, acc.finish(params)))
}

/// A component value and, unless it is gradient-free, its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    pub loss: f64,
    pub grad: Option<GradVector>,
}

impl Term {
    pub fn new(loss: f64, grad: GradVector) -> Self {
        Term { loss, grad: Some(grad) }
    }

    pub fn value(loss: f64) -> Self {
        Term { loss, grad: None }
    }

    pub fn zero() -> Self {
        Term::value(0.0)
    }
}

impl From<(f64, GradVector)> for Term {
    fn from((loss, grad): (f64, GradVector)) -> Self {
        Term::new(loss, grad)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Components {
    pub kd: Term,
    pub cls: Term,
    pub seq: Term,
    pub align: Term,
    pub sp: Term,
    pub klp: Term,
}

impl Components {
    pub fn zero() -> Self {
        Components {
            kd: Term::zero(),
            cls: Term::zero(),
            seq: Term::zero(),
            align: Term::zero(),
            sp: Term::zero(),
            klp: Term::zero(),
        }
    }
}

/// Weighted sum of the components and of their gradients.
pub fn total_loss(c: &Components, cfg: &DistillConfig, param_count: usize) -> (f64, GradVector) {
    let mut grad = GradVector::zeros(param_count);
    let mut loss = 0.0;
    for (w, term) in [
        (cfg.alpha, &c.kd),
        (cfg.beta_kd, &c.cls),
        (cfg.gamma, &c.seq),
        (cfg.delta, &c.align),
        (cfg.epsilon, &c.sp),
        (cfg.epsilon, &c.klp),
    ] {
        if w == 0.0 {
            continue;
        }
        loss += w * term.loss;
        if let Some(g) = &term.grad {
            grad.add_scaled(g, w);
        }
    }
    (loss, grad)
}

/// One row of the distillation training log.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub l_kd: f64,
    pub l_cls: f64,
    pub l_seq: f64,
    pub l_align: f64,
    pub l_sp: f64,
    pub l_klp: f64,
    pub l_total: f64,
}

pub fn write_loss_csv(path: &Path, rows: &[LossRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,l_kd,l_cls,l_seq,l_align,l_sp,l_klp,l_total")?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{}",
            r.step, r.l_kd, r.l_cls, r.l_seq, r.l_align, r.l_sp, r.l_klp, r.l_total
        )?;
    }
    f.flush()?;
    Ok(())
}

/// Everything the refiner objective needs about one training document.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinerItem {
    /// Correction prompt and the expert linearization.
    pub pair: SeqPair,
    pub teacher: TeacherSequence,
    pub cls: Vec<ClsExample>,
    pub pseudo_cells: Vec<FieldAnnotation>,
    pub truth_cells: Vec<FieldAnnotation>,
}

/// The full distillation objective on a mini-batch, sharing one forward pass per
/// sample between the KD and sequence terms.
///
/// The alignment cost of each sample's pseudo cells scales its KD term by
/// `max(0, 1 − align)`: teachers whose table geometry is off are trusted less.
pub fn refiner_objective(
    engine: &Engine,
    reference: &Engine,
    items: &[&RefinerItem],
    replay: &[&SeqPair],
    cfg: &DistillConfig,
) -> Result<(LossRecord, GradVector)> {
    let params = engine.params();
    if items.is_empty() {
        return Err(Error::input("empty refiner batch"));
    }
    let mut acc = Accumulator::new(params);
    let n = items.len() as f64;
    let mut rec = LossRecord::default();
    let v = params.config.vocab_size;
    for item in items {
        let align = align_loss(&item.pseudo_cells, &item.truth_cells, &cfg.align)?;
        rec.l_align += align / n;
        let kd_scale = (1.0 - align).max(0.0);
        let traj = engine.trajectory(&item.pair.prompt, &item.pair.response);
        let t_len = traj.len() as f64;
        let mut dz = vec![0.0; v];
        for (t, act) in traj.iter().enumerate() {
            dz.iter_mut().for_each(|d| *d = 0.0);
            let y = item.pair.response[t] as usize;
            if cfg.gamma > 0.0 {
                rec.l_seq -= act.logp[y] / t_len / n;
                let w = cfg.gamma / t_len / n;
                for (d, p) in dz.iter_mut().zip(act.probs()) {
                    *d += w * p;
                }
                dz[y] -= w;
            }
            if cfg.alpha > 0.0 {
                if let Some((l, g)) = kd_position(act, &item.teacher.dists[t], item.teacher.confidence[t], cfg) {
                    rec.l_kd += kd_scale * l / t_len / n;
                    let w = cfg.alpha * kd_scale / t_len / n;
                    for (d, gk) in dz.iter_mut().zip(&g) {
                        *d += w * gk;
                    }
                }
            }
            acc.backward(engine, act, &dz);
        }
        if cfg.beta_kd > 0.0 && !item.cls.is_empty() {
            let m = item.cls.len() as f64;
            for ex in &item.cls {
                rec.l_cls += accumulate_cls(engine, Some(&mut acc), ex, cfg.beta_kd / m / n) / m / n;
            }
        }
    }
    if cfg.epsilon > 0.0 && !replay.is_empty() {
        let r = replay.len() as f64;
        for p in replay {
            rec.l_klp += accumulate_klp(engine, reference, Some(&mut acc), p, cfg.epsilon / r) / r;
        }
    }
    let mut grad = acc.finish(params);
    if cfg.epsilon > 0.0 {
        let (sp, g) = sp_reg(params, reference.params(), cfg.sp_weights.as_deref())?;
        rec.l_sp = sp;
        grad.add_scaled(&g, cfg.epsilon);
    }
    rec.l_total = cfg.alpha * rec.l_kd
        + cfg.beta_kd * rec.l_cls
        + cfg.gamma * rec.l_seq
        + cfg.delta * rec.l_align
        + cfg.epsilon * (rec.l_sp + rec.l_klp);
    Ok((rec, grad))
}
