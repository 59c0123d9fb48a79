//! JSON-lines persistence for corpora and annotation files.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::channel::{PseudoLabelSet, Source};
use super::corpus::{Document, FieldAnnotation};
use crate::error::{Error, Result};
use crate::vocab::Token;

/// One line of an annotation file: the document record plus its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub doc_id: String,
    pub source: Source,
    pub observation: Vec<Token>,
    pub truth: Vec<FieldAnnotation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_token_agreement: Option<Vec<f64>>,
}

impl AnnotationRecord {
    pub fn new(doc: &Document, source: Source, annotations: Vec<FieldAnnotation>) -> Self {
        AnnotationRecord {
            doc_id: doc.doc_id.clone(),
            source,
            observation: doc.observation.clone(),
            truth: annotations,
            per_token_agreement: None,
        }
    }

    pub fn from_pseudo(doc: &Document, pseudo: &PseudoLabelSet) -> Self {
        AnnotationRecord {
            doc_id: doc.doc_id.clone(),
            source: pseudo.source,
            observation: doc.observation.clone(),
            truth: pseudo.annotations.clone(),
            per_token_agreement: Some(pseudo.per_token_agreement.clone()),
        }
    }

    pub fn to_pseudo(&self) -> Result<PseudoLabelSet> {
        let agreement = match &self.per_token_agreement {
            Some(a) => a.clone(),
            None => vec![1.0; self.truth.iter().map(|a| a.value.len()).sum()],
        };
        Ok(PseudoLabelSet {
            doc_id: self.doc_id.clone(),
            annotations: self.truth.clone(),
            source: self.source,
            per_token_agreement: agreement,
        })
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item)?;
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line)
            .map_err(|e| Error::input(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(item);
    }
    Ok(out)
}
