//! Instruction prompts and the response grammar.
//!
//! ```text
//! prompt   = [BEGIN] observation [SEP] (key_marker value)* [ASK]
//! response = (key_marker value)* [EOS]
//! ```

use super::channel::PseudoLabelSet;
use super::corpus::{check_keys, Document, FieldAnnotation};
use super::schema::{FieldKind, Schema};
use crate::error::{Error, Result};
use crate::vocab::{self, Token};

/// Location of one pseudo-label value inside a prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FieldSpan {
    pub field: usize,
    pub kind: FieldKind,
    pub start: usize,
    pub len: usize,
}

impl FieldSpan {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub tokens: Vec<Token>,
    pub spans: Vec<FieldSpan>,
    /// Half-open token range of the observation.
    pub observation: std::ops::Range<usize>,
}

/// Builds the correction prompt presenting both the document and its pseudo labels.
pub fn synthesize_prompt(schema: &Schema, doc: &Document, pseudo: &PseudoLabelSet) -> Result<Prompt> {
    if pseudo.doc_id != doc.doc_id {
        return Err(Error::structural(format!(
            "pseudo labels for {} given with document {}",
            pseudo.doc_id, doc.doc_id
        )));
    }
    build_prompt(schema, doc, &pseudo.annotations)
}

/// Same layout as [`synthesize_prompt`] for an arbitrary annotation list.
pub fn build_prompt(schema: &Schema, doc: &Document, annotations: &[FieldAnnotation]) -> Result<Prompt> {
    if doc.observation.is_empty() {
        return Err(Error::structural(format!("{}: empty observation", doc.doc_id)));
    }
    check_keys(schema, annotations, &doc.doc_id)?;
    let mut tokens = Vec::with_capacity(doc.observation.len() + schema.value_tokens() + schema.len() + 3);
    tokens.push(vocab::BEGIN);
    tokens.extend_from_slice(&doc.observation);
    let observation = 1..tokens.len();
    tokens.push(vocab::SEP);
    let mut spans = Vec::with_capacity(annotations.len());
    for (i, a) in annotations.iter().enumerate() {
        tokens.push(vocab::key_marker(i));
        spans.push(FieldSpan {
            field: i,
            kind: a.kind,
            start: tokens.len(),
            len: a.value.len(),
        });
        tokens.extend_from_slice(&a.value);
    }
    tokens.push(vocab::ASK);
    Ok(Prompt {
        tokens,
        spans,
        observation,
    })
}

/// `(key_marker value)* [EOS]` in schema order.
pub fn linearize(schema: &Schema, annotations: &[FieldAnnotation]) -> Result<Vec<Token>> {
    check_keys(schema, annotations, "linearize")?;
    let mut out = Vec::with_capacity(schema.value_tokens() + schema.len() + 1);
    for (i, a) in annotations.iter().enumerate() {
        out.push(vocab::key_marker(i));
        out.extend_from_slice(&a.value);
    }
    out.push(vocab::EOS);
    Ok(out)
}

/// Decoded response split back into per-field values.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParsedResponse {
    /// Indexed by schema position; `None` when the field was absent or malformed.
    pub values: Vec<Option<Vec<Token>>>,
    /// Some region could not be attributed to a well-formed field.
    pub malformed: bool,
    pub terminated: bool,
}

impl ParsedResponse {
    pub fn parsed_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_some()).count()
    }
}

/// A key marker opens a field and its value runs to the next key marker or `[EOS]`.
pub fn parse_response(schema: &Schema, tokens: &[Token]) -> ParsedResponse {
    let mut out = ParsedResponse {
        values: vec![None; schema.len()],
        ..Default::default()
    };
    let mut seen = vec![false; schema.len()];
    let mut current: Option<(usize, Vec<Token>)> = None;
    let close = |cur: Option<(usize, Vec<Token>)>, out: &mut ParsedResponse| {
        if let Some((field, value)) = cur {
            let ok = value.iter().any(|&t| vocab::is_value_token(t))
                && value.iter().all(|&t| vocab::is_value_token(t) || t == vocab::PAD);
            if ok {
                out.values[field] = Some(value);
            } else {
                out.malformed = true;
            }
        }
    };
    let mut stray = false;
    for &t in tokens {
        if t == vocab::EOS {
            out.terminated = true;
            break;
        }
        match vocab::key_index(t) {
            Some(k) => {
                close(current.take(), &mut out);
                if k < schema.len() && !seen[k] {
                    seen[k] = true;
                    current = Some((k, Vec::new()));
                } else {
                    stray = true;
                }
            }
            None => match current.as_mut() {
                Some((_, v)) => v.push(t),
                None => stray = true,
            },
        }
    }
    close(current.take(), &mut out);
    out.malformed |= stray;
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdoc::channel::{simulate_ocr, NoiseProfile, Source};
    use crate::synthdoc::corpus::generate_corpus;

    #[test]
    fn prompt_length_arithmetic() {
        let s = Schema::invoice();
        for d in generate_corpus(&s, 20, 2).unwrap() {
            let p = simulate_ocr(&s, &d, &NoiseProfile::ocr_default(1), Source::OcrSim).unwrap();
            let prompt = synthesize_prompt(&s, &d, &p).unwrap();
            let values: usize = p.annotations.iter().map(|a| a.value.len()).sum();
            assert_eq!(prompt.tokens.len(), d.observation.len() + values + s.len() + 3);
            assert_eq!(prompt.tokens[0], vocab::BEGIN);
            assert_eq!(*prompt.tokens.last().unwrap(), vocab::ASK);
            assert_eq!(&prompt.tokens[prompt.observation.clone()], &d.observation[..]);
            for (span, a) in prompt.spans.iter().zip(&p.annotations) {
                assert_eq!(&prompt.tokens[span.range()], &a.value[..]);
                assert_eq!(prompt.tokens[span.start - 1], vocab::key_marker(span.field));
            }
        }
    }

    #[test]
    fn prompt_is_pure() {
        let s = Schema::invoice();
        let d = &generate_corpus(&s, 1, 2).unwrap()[0];
        let p = simulate_ocr(&s, d, &NoiseProfile::zero(0), Source::OcrSim).unwrap();
        assert_eq!(synthesize_prompt(&s, d, &p).unwrap(), synthesize_prompt(&s, d, &p).unwrap());
    }

    #[test]
    fn mismatched_pseudo_rejected() {
        let s = Schema::invoice();
        let docs = generate_corpus(&s, 2, 2).unwrap();
        let mut p = simulate_ocr(&s, &docs[0], &NoiseProfile::zero(0), Source::OcrSim).unwrap();
        assert!(matches!(synthesize_prompt(&s, &docs[1], &p), Err(Error::Structural(_))));
        p.annotations.clear();
        assert!(matches!(synthesize_prompt(&s, &docs[0], &p), Err(Error::Structural(_))));
    }

    #[test]
    fn linearize_then_parse() {
        let s = Schema::invoice();
        let d = &generate_corpus(&s, 1, 2).unwrap()[0];
        let lin = linearize(&s, &d.truth).unwrap();
        assert_eq!(lin.len(), s.value_tokens() + s.len() + 1);
        let parsed = parse_response(&s, &lin);
        assert!(!parsed.malformed && parsed.terminated);
        for (v, a) in parsed.values.iter().zip(&d.truth) {
            assert_eq!(v.as_ref().unwrap(), &a.value);
        }
    }

    #[test]
    fn parse_flags_malformed_regions() {
        let s = Schema::invoice();
        let d5 = vocab::digit(5);
        // stray prefix, duplicate key, a value holding a structural token, an empty value
        let toks = [
            d5,
            vocab::key_marker(0),
            d5,
            vocab::key_marker(0),
            d5,
            vocab::key_marker(1),
            d5,
            vocab::SEP,
            vocab::key_marker(2),
            vocab::key_marker(3),
            d5,
        ];
        let p = parse_response(&s, &toks);
        assert!(p.malformed);
        assert!(!p.terminated);
        assert_eq!(p.values[0], Some(vec![d5]));
        assert_eq!(p.values[1], None);
        assert_eq!(p.values[2], None);
        assert_eq!(p.values[3], Some(vec![d5]));
        assert_eq!(p.parsed_count(), 2);
        assert_eq!(parse_response(&s, &[]).parsed_count(), 0);
    }
}
