//! Simulated OCR / MLLM annotators with systematic error profiles.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::corpus::{check_keys, Document, FieldAnnotation};
use super::schema::{CellBox, Schema};
use crate::error::{Error, Result};
use crate::rng;
use crate::vocab;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    OcrSim,
    MllmSim,
    Merged,
    Noisy,
    Refined,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::OcrSim => "ocr_sim",
            Source::MllmSim => "mllm_sim",
            Source::Merged => "merged",
            Source::Noisy => "noisy",
            Source::Refined => "refined",
        }
    }

    /// Agreement score a simulator attaches to a token it got wrong.
    pub fn disagreement_score(self) -> Option<f64> {
        match self {
            Source::OcrSim => Some(0.6),
            Source::MllmSim => Some(0.5),
            _ => None,
        }
    }
}

/// Per-annotator error rates. Digit substitution is per digit token, truncation,
/// replacement and box jitter are per field, swaps are per same-kind key pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseProfile {
    pub digit_substitution_rate: f64,
    pub truncation_rate: f64,
    pub field_swap_rate: f64,
    pub plausible_replacement_rate: f64,
    /// Maximum absolute coordinate shift applied to cell boxes.
    pub box_jitter: f64,
    pub seed: u64,
}

impl NoiseProfile {
    pub fn zero(seed: u64) -> Self {
        NoiseProfile {
            digit_substitution_rate: 0.0,
            truncation_rate: 0.0,
            field_swap_rate: 0.0,
            plausible_replacement_rate: 0.0,
            box_jitter: 0.0,
            seed,
        }
    }

    /// OCR-like: character-level digit confusions and cut-off spans.
    pub fn ocr_default(seed: u64) -> Self {
        NoiseProfile {
            digit_substitution_rate: 0.06,
            truncation_rate: 0.08,
            field_swap_rate: 0.02,
            plausible_replacement_rate: 0.04,
            box_jitter: 0.02,
            seed,
        }
    }

    /// MLLM-like: fewer character errors, more misattributed and hallucinated fields.
    pub fn mllm_default(seed: u64) -> Self {
        NoiseProfile {
            digit_substitution_rate: 0.02,
            truncation_rate: 0.03,
            field_swap_rate: 0.25,
            plausible_replacement_rate: 0.12,
            box_jitter: 0.05,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("digit_substitution_rate", self.digit_substitution_rate),
            ("truncation_rate", self.truncation_rate),
            ("field_swap_rate", self.field_swap_rate),
            ("plausible_replacement_rate", self.plausible_replacement_rate),
            ("box_jitter", self.box_jitter),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::key(name, format!("{v} outside [0,1]")));
            }
        }
        Ok(())
    }
}

/// Structured pseudo labels for one document with aligned token agreement scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    pub doc_id: String,
    pub annotations: Vec<FieldAnnotation>,
    pub source: Source,
    /// One entry per token of the concatenated annotation values.
    pub per_token_agreement: Vec<f64>,
}

impl PseudoLabelSet {
    /// Agreement scores of field `i`.
    pub fn field_agreement(&self, i: usize) -> &[f64] {
        let start: usize = self.annotations[..i].iter().map(|a| a.value.len()).sum();
        &self.per_token_agreement[start..start + self.annotations[i].value.len()]
    }

    pub fn validate(&self, schema: &Schema) -> Result<()> {
        check_keys(schema, &self.annotations, &self.doc_id)?;
        let total: usize = self.annotations.iter().map(|a| a.value.len()).sum();
        if total != self.per_token_agreement.len() {
            return Err(Error::structural(format!(
                "{}: {} agreement scores for {total} value tokens",
                self.doc_id,
                self.per_token_agreement.len()
            )));
        }
        if self.per_token_agreement.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::input(format!("{}: agreement outside [0,1]", self.doc_id)));
        }
        for a in &self.annotations {
            a.validate()?;
        }
        Ok(())
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Scores `annotations` against `truth` token by token.
fn agreement(annotations: &mut [FieldAnnotation], truth: &[FieldAnnotation], wrong: f64) -> Vec<f64> {
    let mut scores = Vec::new();
    for (a, t) in annotations.iter_mut().zip(truth) {
        let start = scores.len();
        for (i, &tok) in a.value.iter().enumerate() {
            scores.push(if t.value.get(i) == Some(&tok) { 1.0 } else { wrong });
        }
        a.confidence = mean(&scores[start..]);
    }
    scores
}

fn jitter_box(b: &CellBox, amount: f64, r: &mut rng::Rng) -> CellBox {
    if amount == 0.0 {
        return *b;
    }
    let mut c = b.0;
    for v in c.iter_mut() {
        *v = (*v + r.gen_range(-amount..=amount)).clamp(0.0, 1.0);
    }
    let min_side = 1e-3;
    if c[2] - c[0] < min_side {
        c = [b.0[0], c[1], b.0[2], c[3]];
    }
    if c[3] - c[1] < min_side {
        c = [c[0], b.0[1], c[2], b.0[3]];
    }
    CellBox(c)
}

/// Produces a structurally complete pseudo-label set for `doc` (every key present)
/// with errors drawn from `profile`.
pub fn simulate_ocr(
    schema: &Schema,
    doc: &Document,
    profile: &NoiseProfile,
    source: Source,
) -> Result<PseudoLabelSet> {
    profile.validate()?;
    doc.validate(schema)?;
    let wrong = source
        .disagreement_score()
        .ok_or_else(|| Error::config(format!("{} is not a simulator source", source.as_str())))?;
    let mut r = rng::stream(profile.seed, &format!("{}/{}", source.as_str(), doc.doc_id), 0);
    let mut ann = doc.truth.clone();

    // Same-kind swaps; each key joins at most one swap.
    let mut swapped = vec![false; ann.len()];
    for i in 0..ann.len() {
        for j in i + 1..ann.len() {
            if swapped[i] || swapped[j] || ann[i].kind != ann[j].kind {
                continue;
            }
            if r.gen_bool(profile.field_swap_rate) {
                let vi = std::mem::take(&mut ann[i].value);
                ann[i].value = std::mem::replace(&mut ann[j].value, vi);
                swapped[i] = true;
                swapped[j] = true;
            }
        }
    }

    for (a, f) in ann.iter_mut().zip(schema.fields()) {
        if r.gen_bool(profile.plausible_replacement_rate) {
            a.value = f.space.plausible_replacement(&a.value, &mut r);
        }
        for t in a.value.iter_mut() {
            if let Some(d) = vocab::digit_value(*t) {
                if r.gen_bool(profile.digit_substitution_rate) {
                    let shift = r.gen_range(1..10u8);
                    *t = vocab::digit((d + shift) % 10);
                }
            }
        }
        if a.value.len() > 1 && r.gen_bool(profile.truncation_rate) {
            let keep = r.gen_range(1..a.value.len());
            for t in a.value[keep..].iter_mut() {
                *t = vocab::PAD;
            }
        }
        if let Some(b) = &a.cell_box {
            a.cell_box = Some(jitter_box(b, profile.box_jitter, &mut r));
        }
    }

    let per_token_agreement = agreement(&mut ann, &doc.truth, wrong);
    Ok(PseudoLabelSet {
        doc_id: doc.doc_id.clone(),
        annotations: ann,
        source,
        per_token_agreement,
    })
}

/// Field-wise merge: keeps the set with the higher mean agreement; ties go to OCR.
pub fn merge_pseudo(schema: &Schema, ocr: &PseudoLabelSet, mllm: &PseudoLabelSet) -> Result<PseudoLabelSet> {
    if ocr.doc_id != mllm.doc_id {
        return Err(Error::structural(format!(
            "cannot merge pseudo labels of {} and {}",
            ocr.doc_id, mllm.doc_id
        )));
    }
    ocr.validate(schema)?;
    mllm.validate(schema)?;
    let mut annotations = Vec::with_capacity(schema.len());
    let mut per_token_agreement = Vec::new();
    for i in 0..schema.len() {
        let (a, b) = (ocr.field_agreement(i), mllm.field_agreement(i));
        let pick = if mean(b) > mean(a) { (mllm, b) } else { (ocr, a) };
        annotations.push(pick.0.annotations[i].clone());
        per_token_agreement.extend_from_slice(pick.1);
    }
    Ok(PseudoLabelSet {
        doc_id: ocr.doc_id.clone(),
        annotations,
        source: Source::Merged,
        per_token_agreement,
    })
}

/// Runs both simulators and merges them.
pub fn merged_pseudo(
    schema: &Schema,
    doc: &Document,
    ocr: &NoiseProfile,
    mllm: &NoiseProfile,
) -> Result<PseudoLabelSet> {
    let a = simulate_ocr(schema, doc, ocr, Source::OcrSim)?;
    let b = simulate_ocr(schema, doc, mllm, Source::MllmSim)?;
    merge_pseudo(schema, &a, &b)
}
