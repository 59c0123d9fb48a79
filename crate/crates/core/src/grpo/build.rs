//! Preference-pair construction from refined annotations, policy samples and
//! rule-based validators.

use serde::{Deserialize, Serialize};

use super::{PreferencePair, Provenance};
use crate::error::{Error, Result};
use crate::policy::{DecodeMode, Engine, PolicyParams};
use crate::rng;
use crate::synthdoc::{
    inject_annotation_noise, is_amount, linearize, parse_date, parse_response, synthesize_prompt, Document,
    FieldAnnotation, FieldKind, PseudoLabelSet, Schema,
};
use crate::vocab::{self, Token};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Validator {
    /// Every date field parses as a real `YYYY-MM-DD` date.
    DateFormat,
    /// Every amount field is `digits '.' digit digit`.
    AmountFormat,
    /// Every key appears exactly once, the response is well formed and terminated.
    KeyPresence,
}

impl Validator {
    pub const ALL: [Validator; 3] = [Validator::DateFormat, Validator::AmountFormat, Validator::KeyPresence];

    pub fn check(self, schema: &Schema, response: &[Token]) -> bool {
        let parsed = parse_response(schema, response);
        let kind_ok = |kind: FieldKind, ok: fn(&[Token]) -> bool| {
            schema
                .fields()
                .iter()
                .zip(&parsed.values)
                .filter(|(f, _)| f.kind == kind)
                .all(|(_, v)| v.as_deref().is_none_or(ok))
        };
        match self {
            Validator::DateFormat => kind_ok(FieldKind::Date, |v| parse_date(v).is_some()),
            Validator::AmountFormat => kind_ok(FieldKind::Amount, is_amount),
            Validator::KeyPresence => {
                !parsed.malformed && parsed.terminated && parsed.parsed_count() == schema.len()
            }
        }
    }
}

pub fn passes_all(validators: &[Validator], schema: &Schema, response: &[Token]) -> bool {
    validators.iter().all(|v| v.check(schema, response))
}

/// Knobs for candidate sampling and token weighting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BuildConfig {
    pub candidates: usize,
    pub temperature: f64,
    pub weight_mode: WeightMode,
    pub seed: u64,
}

impl Default for BuildConfig {
    fn default() -> Self {
        BuildConfig {
            candidates: 4,
            temperature: 1.0,
            weight_mode: WeightMode::Mask,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// 1 on value tokens, 0 on key markers and `[EOS]`.
    Mask,
    /// The mask scaled by the sampling policy's probability of the preferred token.
    PolicyProb,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SkipReport {
    pub skipped: usize,
    pub reasons: Vec<(String, String)>,
}

/// One document's worth of inputs to [`build_preferences`].
pub struct PreferenceSource<'a> {
    pub doc: &'a Document,
    pub pseudo: &'a PseudoLabelSet,
    pub refined: &'a [FieldAnnotation],
}

/// `w_t` over the first `t_eff` positions of a linearized response.
fn token_weights(y_plus: &[Token], t_eff: usize) -> Vec<f64> {
    y_plus[..t_eff]
        .iter()
        .map(|&t| if vocab::key_index(t).is_some() || t == vocab::EOS { 0.0 } else { 1.0 })
        .collect()
}

fn corrupt(schema: &Schema, refined: &[FieldAnnotation], seed: u64) -> Result<Vec<Token>> {
    let ratio = 1.0 / schema.len() as f64;
    let noisy = inject_annotation_noise(schema, &[refined.to_vec()], ratio, seed)?;
    linearize(schema, &noisy.annotations[0])
}

/// Builds one preference pair per source document.
///
/// `y⁺` is the linearized refined annotation when it passes every validator. `y⁻` is
/// the first sampled candidate failing a validator, else the first one differing
/// from `y⁺`, else a one-field corruption of `y⁺`. When the refined annotation
/// itself fails a validator, the first validator-passing candidate becomes `y⁺`
/// and the refined annotation `y⁻`; without such a candidate the document is skipped.
pub fn build_preferences(
    schema: &Schema,
    sources: &[PreferenceSource],
    params: &PolicyParams,
    validators: &[Validator],
    cfg: &BuildConfig,
) -> Result<(Vec<PreferencePair>, SkipReport)> {
    if cfg.candidates == 0 {
        return Err(Error::key("candidates", "must be at least 1"));
    }
    if !(cfg.temperature.is_finite() && cfg.temperature > 0.0) {
        return Err(Error::key("temperature", format!("{} must be positive", cfg.temperature)));
    }
    let engine = Engine::new(params);
    let mut pairs = Vec::with_capacity(sources.len());
    let mut skips = SkipReport::default();
    for src in sources {
        let doc_id = &src.doc.doc_id;
        let prompt = synthesize_prompt(schema, src.doc, src.pseudo)?.tokens;
        let refined = linearize(schema, src.refined)?;
        let max_len = refined.len() + 8;
        let candidates: Vec<Vec<Token>> = (0..cfg.candidates)
            .map(|c| {
                let seed = rng::derive_seed(cfg.seed, &format!("candidate/{doc_id}"), c as u64);
                engine.decode(
                    &prompt,
                    DecodeMode::Sample {
                        temperature: cfg.temperature,
                        seed,
                    },
                    max_len,
                )
            })
            .collect();

        let chosen = if passes_all(validators, schema, &refined) {
            let failing = candidates.iter().find(|c| **c != refined && !passes_all(validators, schema, c));
            let differing = candidates.iter().find(|c| **c != refined);
            match (failing, differing) {
                (Some(c), _) => Some((refined.clone(), c.clone(), Provenance::Validator)),
                (None, Some(c)) => Some((refined.clone(), c.clone(), Provenance::RefinedVsCandidate)),
                (None, None) => {
                    let seed = rng::derive_seed(cfg.seed, &format!("corrupt/{doc_id}"), 0);
                    let c = corrupt(schema, src.refined, seed)?;
                    (c != refined).then(|| (refined.clone(), c, Provenance::Corruption))
                }
            }
        } else {
            candidates
                .iter()
                .find(|c| passes_all(validators, schema, c))
                .map(|good| (good.clone(), refined.clone(), Provenance::CandidateVsCandidate))
        };

        let Some((y_plus, y_minus, provenance)) = chosen else {
            skips.skipped += 1;
            skips.reasons.push((doc_id.clone(), "no valid dispreferred response".into()));
            continue;
        };
        let t_eff = y_plus.len().min(y_minus.len());
        let mut token_weights = token_weights(&y_plus, t_eff);
        if cfg.weight_mode == WeightMode::PolicyProb {
            for (t, act) in engine.trajectory(&prompt, &y_plus[..t_eff]).iter().enumerate() {
                token_weights[t] *= act.logp[y_plus[t] as usize].exp();
            }
        }
        pairs.push(PreferencePair {
            doc_id: doc_id.clone(),
            prompt,
            y_plus,
            y_minus,
            token_weights,
            provenance,
        });
    }
    Ok((pairs, skips))
}
