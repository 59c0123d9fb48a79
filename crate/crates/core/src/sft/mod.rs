//! Supervised fine-tuning with dynamic prompt augmentation: pseudo-label spans in
//! the prompt are masked or replaced on the fly while the target stays clean, so
//! the model has to check the prompt's hints against the observation.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{accumulate_nll, probe_nll, run_sgd, Accumulator, Engine, PolicyParams, SeqPair, TrainConfig, TrainLog};
use crate::rng;
use crate::synthdoc::{Prompt, Schema};
use crate::vocab::{self, Token};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynPromptConfig {
    /// A field is perturbed when its uniform draw exceeds this value.
    pub perturb_threshold: f64,
    /// Probability that a perturbed field is masked rather than replaced.
    pub mask_vs_replace_ratio: f64,
    pub seed: u64,
}

impl Default for DynPromptConfig {
    fn default() -> Self {
        DynPromptConfig {
            perturb_threshold: 0.3,
            mask_vs_replace_ratio: 0.5,
            seed: 0,
        }
    }
}

impl DynPromptConfig {
    /// Threshold 1: no draw can exceed it, so prompts pass through unchanged.
    pub fn disabled() -> Self {
        DynPromptConfig {
            perturb_threshold: 1.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (k, v) in [
            ("perturb_threshold", self.perturb_threshold),
            ("mask_vs_replace_ratio", self.mask_vs_replace_ratio),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::key(k, format!("{v} is outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Keep,
    Mask,
    Replace,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldPerturbation {
    pub field: usize,
    pub draw: f64,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PerturbationRecord {
    pub step: usize,
    pub item: usize,
    pub fields: Vec<FieldPerturbation>,
}

/// Perturbs the pseudo-label spans of `prompt`, drawing from stream `index` of
/// `cfg.seed`. Replacement values come from the field's value space and are
/// padded or cut to the span width so token offsets never move.
pub fn perturb_prompt(
    schema: &Schema,
    prompt: &Prompt,
    cfg: &DynPromptConfig,
    index: u64,
) -> Result<(Vec<Token>, Vec<FieldPerturbation>)> {
    cfg.validate()?;
    let n = prompt.tokens.len();
    for s in &prompt.spans {
        let r = s.range();
        if r.end > n || r.start < prompt.observation.end && prompt.observation.start < r.end {
            return Err(Error::structural(format!(
                "span {}..{} of field {} lies outside the pseudo-label section",
                r.start, r.end, s.field
            )));
        }
        if s.field >= schema.len() {
            return Err(Error::structural(format!("span refers to field {} beyond the schema", s.field)));
        }
    }
    let mut r = rng::stream(cfg.seed, "dynprompt", index);
    let mut tokens = prompt.tokens.clone();
    let mut record = Vec::with_capacity(prompt.spans.len());
    for s in &prompt.spans {
        let draw: f64 = r.gen();
        let action = if draw > cfg.perturb_threshold {
            if r.gen_bool(cfg.mask_vs_replace_ratio) {
                Action::Mask
            } else {
                Action::Replace
            }
        } else {
            Action::Keep
        };
        let span = &mut tokens[s.range()];
        match action {
            Action::Keep => {}
            Action::Mask => span.iter_mut().for_each(|t| *t = vocab::PAD),
            Action::Replace => {
                let mut v = schema.fields()[s.field].space.plausible_replacement(span, &mut r);
                v.resize(s.len, vocab::PAD);
                span.copy_from_slice(&v);
            }
        }
        record.push(FieldPerturbation {
            field: s.field,
            draw,
            action,
        });
    }
    Ok((tokens, record))
}

/// An SFT example: a structured prompt and its clean target.
#[derive(Debug, Clone, PartialEq)]
pub struct SftItem {
    pub prompt: Prompt,
    pub response: Vec<Token>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SftLog {
    pub train: TrainLog,
    pub perturbations: Vec<PerturbationRecord>,
}

/// Mini-batch SGD on mean token NLL, with every batch prompt freshly perturbed.
///
/// Batch order uses the same stream as an unaugmented run and perturbations use
/// their own, so a disabled augmentation reproduces plain SFT bit for bit.
pub fn sft_train(
    initial: &PolicyParams,
    schema: &Schema,
    items: &[SftItem],
    dyn_cfg: &DynPromptConfig,
    cfg: &TrainConfig,
) -> Result<(PolicyParams, SftLog)> {
    dyn_cfg.validate()?;
    cfg.validate()?;
    if items.is_empty() {
        return Err(Error::config("sft: no training items"));
    }
    for it in items {
        if it.response.is_empty() {
            return Err(Error::input("empty response in training item"));
        }
        vocab::check_tokens(&it.prompt.tokens, initial.config.vocab_size)?;
        vocab::check_tokens(&it.response, initial.config.vocab_size)?;
    }
    let probe: Vec<SeqPair> = items
        .iter()
        .take(crate::policy::PROBE_SIZE)
        .map(|it| SeqPair {
            prompt: it.prompt.tokens.clone(),
            response: it.response.clone(),
        })
        .collect();
    let mut params = initial.clone();
    let probe_start = probe_nll(&params, &probe, probe.len());
    let mut perturbations = Vec::new();
    let active = dyn_cfg.perturb_threshold < 1.0;
    let losses = run_sgd(&mut params, cfg, items.len(), "sft", |step, batch, p| {
        let engine = Engine::new(p);
        let mut acc = Accumulator::new(p);
        let w = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        for (j, &i) in batch.iter().enumerate() {
            let it = &items[i];
            let prompt = if active {
                let (tokens, fields) = perturb_prompt(schema, &it.prompt, dyn_cfg, ((step as u64) << 20) | j as u64)?;
                perturbations.push(PerturbationRecord { step, item: i, fields });
                std::borrow::Cow::Owned(tokens)
            } else {
                std::borrow::Cow::Borrowed(&it.prompt.tokens)
            };
            loss += w * accumulate_nll(&engine, Some(&mut acc), &prompt, &it.response, w);
        }
        Ok((loss, acc.finish(p)))
    })?;
    let probe_end = probe_nll(&params, &probe, probe.len());
    Ok((
        params,
        SftLog {
            train: TrainLog {
                losses,
                probe_start,
                probe_end,
            },
            perturbations,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{train_nll, PolicyConfig};
    use crate::synthdoc::{build_prompt, generate_corpus, linearize, merged_pseudo, synthesize_prompt, NoiseProfile};

    fn items(n: usize, seed: u64) -> (Schema, Vec<SftItem>) {
        let s = Schema::invoice();
        let docs = generate_corpus(&s, n, seed).unwrap();
        let items = docs
            .iter()
            .map(|d| {
                let p = merged_pseudo(&s, d, &NoiseProfile::ocr_default(seed), &NoiseProfile::mllm_default(seed)).unwrap();
                SftItem {
                    prompt: synthesize_prompt(&s, d, &p).unwrap(),
                    response: linearize(&s, &d.truth).unwrap(),
                }
            })
            .collect();
        (s, items)
    }

    #[test]
    fn degenerate_thresholds() {
        let (s, its) = items(5, 1);
        for (k, it) in its.iter().enumerate() {
            let keep = DynPromptConfig::disabled();
            let (t, rec) = perturb_prompt(&s, &it.prompt, &keep, k as u64).unwrap();
            assert_eq!(t, it.prompt.tokens);
            assert!(rec.iter().all(|f| f.action == Action::Keep));
            let all = DynPromptConfig {
                perturb_threshold: 0.0,
                ..Default::default()
            };
            let (t, rec) = perturb_prompt(&s, &it.prompt, &all, k as u64).unwrap();
            assert!(rec.iter().all(|f| f.action != Action::Keep));
            for (sp, f) in it.prompt.spans.iter().zip(&rec) {
                let changed = t[sp.range()] != it.prompt.tokens[sp.range()];
                // A masked span that was already fully padded cannot change.
                let was_pad = it.prompt.tokens[sp.range()].iter().all(|&x| x == vocab::PAD);
                assert!(changed || (f.action == Action::Mask && was_pad));
            }
        }
    }

    #[test]
    fn only_pseudo_spans_change() {
        let (s, its) = items(20, 2);
        let cfg = DynPromptConfig::default();
        for (k, it) in its.iter().enumerate() {
            for trial in 0..10 {
                let (t, rec) = perturb_prompt(&s, &it.prompt, &cfg, (k * 10 + trial) as u64).unwrap();
                assert_eq!(t.len(), it.prompt.tokens.len());
                let mut in_span = vec![false; t.len()];
                for sp in &it.prompt.spans {
                    in_span[sp.range()].iter_mut().for_each(|b| *b = true);
                }
                for i in 0..t.len() {
                    if !in_span[i] {
                        assert_eq!(t[i], it.prompt.tokens[i]);
                    }
                }
                for (sp, f) in it.prompt.spans.iter().zip(&rec) {
                    match f.action {
                        Action::Keep => assert_eq!(t[sp.range()], it.prompt.tokens[sp.range()]),
                        Action::Mask => assert!(t[sp.range()].iter().all(|&x| x == vocab::PAD)),
                        Action::Replace => {
                            let field = &s.fields()[sp.field];
                            assert!(field.space.is_valid(&t[sp.range()]), "{:?}", &t[sp.range()]);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn perturbation_rate_matches_threshold() {
        let (s, its) = items(1, 3);
        let cfg = DynPromptConfig::default();
        let n = 10_000;
        let mut counts = vec![0usize; s.len()];
        let mut masks = 0usize;
        for k in 0..n {
            let (_, rec) = perturb_prompt(&s, &its[0].prompt, &cfg, k as u64).unwrap();
            for f in rec {
                if f.action != Action::Keep {
                    counts[f.field] += 1;
                }
                masks += (f.action == Action::Mask) as usize;
            }
        }
        for c in &counts {
            let rate = *c as f64 / n as f64;
            assert!((rate - 0.7).abs() <= 0.02, "{rate}");
        }
        let total: usize = counts.iter().sum();
        assert!((masks as f64 / total as f64 - 0.5).abs() < 0.02);
    }

    #[test]
    fn out_of_bounds_span_rejected() {
        let (s, its) = items(1, 4);
        let mut p = its[0].prompt.clone();
        p.spans[0].start = p.tokens.len() - 1;
        assert!(matches!(
            perturb_prompt(&s, &p, &DynPromptConfig::default(), 0),
            Err(Error::Structural(_))
        ));
        let mut p = its[0].prompt.clone();
        p.spans[0].start = 2;
        assert!(matches!(
            perturb_prompt(&s, &p, &DynPromptConfig::default(), 0),
            Err(Error::Structural(_))
        ));
        let bad = DynPromptConfig {
            perturb_threshold: 1.5,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::ConfigKey { key, .. }) if key == "perturb_threshold"));
    }

    fn small() -> PolicyParams {
        PolicyParams::init(PolicyConfig {
            embed_dim: 4,
            hidden_dim: 8,
            seed: 5,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn disabled_augmentation_is_plain_sft() {
        let (s, its) = items(30, 5);
        let cfg = TrainConfig {
            steps: 20,
            lr: 0.05,
            batch_size: 4,
            seed: 9,
        };
        let init = small();
        let (a, log) = sft_train(&init, &s, &its, &DynPromptConfig::disabled(), &cfg).unwrap();
        assert!(log.perturbations.is_empty());
        let pairs: Vec<SeqPair> = its
            .iter()
            .map(|it| SeqPair {
                prompt: it.prompt.tokens.clone(),
                response: it.response.clone(),
            })
            .collect();
        let mut b = init.clone();
        train_nll(&mut b, &pairs, &cfg, "sft").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn augmented_training_learns_and_is_reproducible() {
        let (s, its) = items(30, 6);
        let cfg = TrainConfig {
            steps: 40,
            lr: 0.05,
            batch_size: 4,
            seed: 1,
        };
        let dc = DynPromptConfig {
            seed: 2,
            ..Default::default()
        };
        let (a, log) = sft_train(&small(), &s, &its, &dc, &cfg).unwrap();
        assert!(log.train.probe_end < log.train.probe_start);
        assert_eq!(log.perturbations.len(), 40 * 4);
        let (b, _) = sft_train(&small(), &s, &its, &dc, &cfg).unwrap();
        assert_eq!(a, b);
        let other = DynPromptConfig { seed: 3, ..dc };
        assert_ne!(sft_train(&small(), &s, &its, &other, &cfg).unwrap().0, a);
    }

    #[test]
    fn targets_are_untouched() {
        let (s, its) = items(3, 7);
        let d = &generate_corpus(&s, 3, 7).unwrap()[0];
        let p = build_prompt(&s, d, &d.truth).unwrap();
        let (t, _) = perturb_prompt(&s, &p, &DynPromptConfig::default(), 1).unwrap();
        assert_eq!(t[p.observation.clone()], d.observation[..]);
        assert_eq!(its[0].response, linearize(&s, &d.truth).unwrap());
    }
}
