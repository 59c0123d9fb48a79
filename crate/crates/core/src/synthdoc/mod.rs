//! Synthetic key-value documents, simulated annotators, annotation noise and
//! instruction prompts.

mod channel;
mod corpus;
pub mod io;
mod noise;
mod prompt;
mod schema;

pub use channel::{merge_pseudo, merged_pseudo, simulate_ocr, NoiseProfile, PseudoLabelSet, Source};
pub use corpus::{check_keys, generate_corpus, Document, FieldAnnotation};
pub use noise::{inject_annotation_noise, NoisyAnnotations};
pub use prompt::{
    build_prompt, linearize, parse_response, synthesize_prompt, FieldSpan, ParsedResponse, Prompt,
};
pub use schema::{is_amount, parse_date, CellBox, FieldKind, FieldSchema, Schema, ValueSpace};
