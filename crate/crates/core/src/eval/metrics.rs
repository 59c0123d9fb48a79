//! Field Match Ratio with value normalization.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdoc::{parse_response, Document, FieldAnnotation, FieldKind, Schema};
use crate::vocab::{self, Token};

/// Canonical string form of a value: `[PAD]` dropped, letters folded, dates as
/// `YYYY-MM-DD`, amounts without leading zeros and with two decimals.
pub fn normalize_value(value: &[Token], kind: FieldKind) -> String {
    normalize_str(&vocab::render(value), kind)
}

/// The string half of [`normalize_value`]; idempotent.
pub fn normalize_str(s: &str, kind: FieldKind) -> String {
    let s = s.to_lowercase();
    match kind {
        FieldKind::Date => canonical_date(&s).unwrap_or(s),
        FieldKind::Amount => canonical_amount(&s).unwrap_or(s),
        _ => s,
    }
}

fn all_digits(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit())
}

/// Accepts `Y-M-D` with a four-digit year, `D.M.Y`, and `YYYYMMDD`.
fn canonical_date(s: &str) -> Option<String> {
    let (y, m, d) = if let [y, m, d] = s.split('-').collect::<Vec<_>>()[..] {
        (y, m, d)
    } else if let [d, m, y] = s.split('.').collect::<Vec<_>>()[..] {
        (y, m, d)
    } else if s.len() == 8 && all_digits(s) {
        (&s[..4], &s[4..6], &s[6..])
    } else {
        return None;
    };
    if y.len() != 4 || !all_digits(y) || !all_digits(m) || !all_digits(d) || m.len() > 2 || d.len() > 2 {
        return None;
    }
    let (m, d): (u32, u32) = (m.parse().ok()?, d.parse().ok()?);
    ((1..=12).contains(&m) && (1..=31).contains(&d)).then(|| format!("{y}-{m:02}-{d:02}"))
}

/// `digits` or `digits.d{1,2}`.
fn canonical_amount(s: &str) -> Option<String> {
    let (int, frac) = s.split_once('.').unwrap_or((s, ""));
    if !all_digits(int) || frac.len() > 2 || !(frac.is_empty() || all_digits(frac)) {
        return None;
    }
    let int = int.trim_start_matches('0');
    let int = if int.is_empty() { "0" } else { int };
    Some(format!("{int}.{frac:0<2}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalField {
    pub key: String,
    pub kind: FieldKind,
    pub truth: Vec<Token>,
    /// `None` when the prediction lacks this key; counted as a mismatch.
    pub pred: Option<Vec<Token>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalDoc {
    pub doc_id: String,
    pub fields: Vec<EvalField>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalBatch {
    pub docs: Vec<EvalDoc>,
}

impl EvalBatch {
    /// Pairs each document's truth with a predicted annotation list. Predicted
    /// keys outside the document's key set are rejected.
    pub fn from_annotations(docs: &[Document], predicted: &[Vec<FieldAnnotation>]) -> Result<Self> {
        if docs.len() != predicted.len() {
            return Err(Error::structural(format!(
                "{} documents but {} predictions",
                docs.len(),
                predicted.len()
            )));
        }
        let mut out = Vec::with_capacity(docs.len());
        for (doc, pred) in docs.iter().zip(predicted) {
            if let Some(a) = pred.iter().find(|a| doc.annotation(&a.key).is_none()) {
                return Err(Error::structural(format!("key `{}` not in document {}", a.key, doc.doc_id)));
            }
            out.push(EvalDoc {
                doc_id: doc.doc_id.clone(),
                fields: doc
                    .truth
                    .iter()
                    .map(|t| EvalField {
                        key: t.key.clone(),
                        kind: t.kind,
                        truth: t.value.clone(),
                        pred: pred.iter().find(|a| a.key == t.key).map(|a| a.value.clone()),
                    })
                    .collect(),
            });
        }
        Ok(EvalBatch { docs: out })
    }

    /// Pairs truth with parsed model responses.
    pub fn from_responses(schema: &Schema, docs: &[Document], responses: &[Vec<Token>]) -> Result<Self> {
        if docs.len() != responses.len() {
            return Err(Error::structural(format!(
                "{} documents but {} responses",
                docs.len(),
                responses.len()
            )));
        }
        let predicted: Vec<Vec<FieldAnnotation>> = docs
            .iter()
            .zip(responses)
            .map(|(doc, r)| {
                let parsed = parse_response(schema, r);
                doc.truth
                    .iter()
                    .filter_map(|t| {
                        let i = schema.index_of(&t.key)?;
                        let v = parsed.values[i].clone()?;
                        Some(FieldAnnotation { value: v, ..t.clone() })
                    })
                    .collect()
            })
            .collect();
        Self::from_annotations(docs, &predicted)
    }

    pub fn is_empty(&self) -> bool {
        self.docs.iter().all(|d| d.fields.is_empty())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FmrReport {
    pub micro: f64,
    pub macro_: f64,
    /// key → (correct, total)
    pub per_key: BTreeMap<String, (usize, usize)>,
    pub doc_count: usize,
}

/// Scores a batch; `raw` compares token strings without normalization.
pub fn fmr_report(batch: &EvalBatch, raw: bool) -> Result<FmrReport> {
    if batch.is_empty() {
        return Err(Error::UndefinedMetric("FMR of an empty batch".into()));
    }
    let mut per_key: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for doc in &batch.docs {
        for f in &doc.fields {
            let hit = f.pred.as_ref().is_some_and(|p| {
                if raw {
                    *p == f.truth
                } else {
                    normalize_value(p, f.kind) == normalize_value(&f.truth, f.kind)
                }
            });
            let e = per_key.entry(f.key.clone()).or_default();
            e.0 += hit as usize;
            e.1 += 1;
        }
    }
    let (c, t) = per_key.values().fold((0, 0), |(c, t), &(a, b)| (c + a, t + b));
    let macro_ = per_key.values().map(|&(a, b)| a as f64 / b as f64).sum::<f64>() / per_key.len() as f64;
    Ok(FmrReport {
        micro: c as f64 / t as f64,
        macro_,
        per_key,
        doc_count: batch.docs.len(),
    })
}

pub fn fmr_micro(batch: &EvalBatch) -> Result<f64> {
    fmr_report(batch, false).map(|r| r.micro)
}

pub fn fmr_macro(batch: &EvalBatch) -> Result<f64> {
    fmr_report(batch, false).map(|r| r.macro_)
}
