use serde::{Deserialize, Serialize};

use super::schema::{CellBox, FieldKind, Schema};
use crate::error::{Error, Result};
use crate::rng;
use crate::vocab::{self, Token};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldAnnotation {
    pub key: String,
    pub value: Vec<Token>,
    pub kind: FieldKind,
    #[serde(rename = "box")]
    pub cell_box: Option<CellBox>,
    pub confidence: f64,
}

impl FieldAnnotation {
    pub fn validate(&self) -> Result<()> {
        if self.value.is_empty() {
            return Err(Error::input(format!("field `{}` has an empty value", self.key)));
        }
        if let Some(b) = &self.cell_box {
            if !b.is_valid() {
                return Err(Error::input(format!("field `{}` has an invalid box {:?}", self.key, b.0)));
            }
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::input(format!(
                "field `{}` confidence {} outside [0,1]",
                self.key, self.confidence
            )));
        }
        Ok(())
    }
}

/// A synthetic document: the rendered token stream plus its ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub observation: Vec<Token>,
    pub truth: Vec<FieldAnnotation>,
}

impl Document {
    pub fn validate(&self, schema: &Schema) -> Result<()> {
        if self.observation.is_empty() {
            return Err(Error::input(format!("{}: empty observation", self.doc_id)));
        }
        vocab::check_tokens(&self.observation, vocab::VOCAB_SIZE)?;
        check_keys(schema, &self.truth, &self.doc_id)?;
        for a in &self.truth {
            a.validate()?;
            vocab::check_tokens(&a.value, vocab::VOCAB_SIZE)?;
        }
        Ok(())
    }

    pub fn annotation(&self, key: &str) -> Option<&FieldAnnotation> {
        self.truth.iter().find(|a| a.key == key)
    }
}

/// Annotations must list every schema key once, in schema order.
pub fn check_keys(schema: &Schema, annotations: &[FieldAnnotation], doc_id: &str) -> Result<()> {
    let keys: Vec<&str> = annotations.iter().map(|a| a.key.as_str()).collect();
    let expected: Vec<&str> = schema.fields().iter().map(|f| f.key.as_str()).collect();
    if keys != expected {
        return Err(Error::structural(format!(
            "{doc_id}: annotation keys {keys:?} do not match schema {expected:?}"
        )));
    }
    Ok(())
}

pub(crate) fn count_occurrences(haystack: &[Token], needle: &[Token]) -> usize {
    if needle.is_empty() || needle.len() > haystack.len() {
        return 0;
    }
    haystack.windows(needle.len()).filter(|w| *w == needle).count()
}

/// Label variant pool for a document category: free-form, tabular or mixed layouts
/// in equal shares (by document index).
fn label_variant(category: usize, draw: usize) -> usize {
    match category {
        0 => draw % 2,
        1 => 2 + draw % 2,
        _ => draw % vocab::LABEL_VARIANTS,
    }
}

/// Generates `count` documents. The observation renders every field as one label
/// token followed by its value, so each truth value appears in it exactly once.
pub fn generate_corpus(schema: &Schema, count: usize, seed: u64) -> Result<Vec<Document>> {
    if count == 0 {
        return Err(Error::config("corpus size must be at least 1"));
    }
    let mut docs = Vec::with_capacity(count);
    for i in 0..count {
        let mut r = rng::stream(seed, "corpus", i as u64);
        let category = i % 3;
        loop {
            let mut observation = Vec::new();
            let mut truth = Vec::with_capacity(schema.len());
            for (k, f) in schema.fields().iter().enumerate() {
                let value = f.space.sample(&mut r);
                let cell_box = f.space.sample_box(&mut r);
                let variant = label_variant(category, rand::Rng::gen_range(&mut r, 0..vocab::LABEL_VARIANTS));
                observation.push(vocab::label_token(k, variant));
                observation.extend_from_slice(&value);
                truth.push(FieldAnnotation {
                    key: f.key.clone(),
                    value,
                    kind: f.kind,
                    cell_box,
                    confidence: 1.0,
                });
            }
            if truth.iter().all(|a| count_occurrences(&observation, &a.value) == 1) {
                docs.push(Document {
                    doc_id: format!("doc-{seed}-{i:05}"),
                    observation,
                    truth,
                });
                break;
            }
        }
    }
    Ok(docs)
}
