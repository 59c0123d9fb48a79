//! Label refinement in three stages: build correction prompts from simulated
//! pseudo labels on expert documents, distill a refiner against the expert
//! targets, then run the refiner over a noisy corpus with a pseudo-label fallback.

use serde::{Deserialize, Serialize};

use crate::distill::{cells, cls_examples, refiner_objective, DistillConfig, LossRecord, RefinerItem, TeacherSequence};
use crate::error::{Error, Result};
use crate::policy::{run_sgd, BatchSampler, DecodeMode, Engine, PolicyParams, SeqPair, TrainConfig};
use crate::rng;
use crate::synthdoc::io::AnnotationRecord;
use crate::synthdoc::{
    build_prompt, linearize, merge_pseudo, parse_response, simulate_ocr, Document, FieldAnnotation, NoiseProfile,
    PseudoLabelSet, Schema, Source,
};
use crate::vocab::Token;

/// Which pseudo-label sets become correction prompts for each expert document.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeArity {
    /// The merged set only.
    Merged,
    /// Each simulator's set plus the merged one.
    All,
}

impl MergeArity {
    pub fn count(self) -> usize {
        match self {
            MergeArity::Merged => 1,
            MergeArity::All => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Config {
    pub ocr: NoiseProfile,
    pub mllm: NoiseProfile,
    pub arity: MergeArity,
    pub seed: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            ocr: NoiseProfile::ocr_default(0),
            mllm: NoiseProfile::mllm_default(0),
            arity: MergeArity::All,
            seed: 0,
        }
    }
}

/// A correction example: the pseudo labels as shown in the prompt and the
/// expert linearization the refiner must produce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Pair {
    pub doc: Document,
    pub pseudo: PseudoLabelSet,
    pub prompt: Vec<Token>,
    pub target: Vec<Token>,
}

impl Stage1Pair {
    pub fn seq_pair(&self) -> SeqPair {
        SeqPair {
            prompt: self.prompt.clone(),
            response: self.target.clone(),
        }
    }
}

/// Simulator seeds are derived from `cfg.seed`; the profiles' own seeds are ignored.
pub fn stage1_build(schema: &Schema, expert_docs: &[Document], cfg: &Stage1Config) -> Result<Vec<Stage1Pair>> {
    if expert_docs.is_empty() {
        return Err(Error::config("stage1: the expert set is empty"));
    }
    let ocr = NoiseProfile {
        seed: rng::derive_seed(cfg.seed, "stage1/ocr", 0),
        ..cfg.ocr.clone()
    };
    let mllm = NoiseProfile {
        seed: rng::derive_seed(cfg.seed, "stage1/mllm", 0),
        ..cfg.mllm.clone()
    };
    let mut out = Vec::with_capacity(expert_docs.len() * cfg.arity.count());
    for doc in expert_docs {
        let a = simulate_ocr(schema, doc, &ocr, Source::OcrSim)?;
        let b = simulate_ocr(schema, doc, &mllm, Source::MllmSim)?;
        let merged = merge_pseudo(schema, &a, &b)?;
        let sets = match cfg.arity {
            MergeArity::Merged => vec![merged],
            MergeArity::All => vec![a, b, merged],
        };
        let target = linearize(schema, &doc.truth)?;
        for pseudo in sets {
            out.push(Stage1Pair {
                doc: doc.clone(),
                prompt: build_prompt(schema, doc, &pseudo.annotations)?.tokens,
                pseudo,
                target: target.clone(),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Config {
    pub distill: DistillConfig,
    pub train: TrainConfig,
    /// Replay pairs per step for the output-preservation term.
    pub replay_batch: usize,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            distill: DistillConfig::default(),
            train: TrainConfig {
                steps: 1500,
                lr: 0.05,
                batch_size: 8,
                seed: 0,
            },
            replay_batch: 2,
        }
    }
}

pub fn refiner_items(schema: &Schema, pairs: &[Stage1Pair], cfg: &DistillConfig) -> Result<Vec<RefinerItem>> {
    pairs
        .iter()
        .map(|p| {
            Ok(RefinerItem {
                pair: p.seq_pair(),
                teacher: TeacherSequence::from_pseudo(schema, &p.pseudo, cfg.label_smoothing)?,
                cls: cls_examples(schema, &p.prompt, &p.doc.truth)?,
                pseudo_cells: cells(&p.pseudo.annotations),
                truth_cells: cells(&p.doc.truth),
            })
        })
        .collect()
}

/// Distills the refiner, starting from `reference`, which also anchors the
/// preservation terms. `replay` may be empty only when ε is zero.
pub fn stage2_train_refiner(
    schema: &Schema,
    reference: &PolicyParams,
    pairs: &[Stage1Pair],
    replay: &[SeqPair],
    cfg: &Stage2Config,
) -> Result<(PolicyParams, Vec<LossRecord>)> {
    cfg.distill.validate_for(reference.len())?;
    if pairs.is_empty() {
        return Err(Error::config("stage2: no stage-1 pairs"));
    }
    let use_replay = cfg.distill.epsilon > 0.0 && cfg.replay_batch > 0;
    if use_replay && replay.is_empty() {
        return Err(Error::key("replay_batch", "the preservation term needs a non-empty replay buffer"));
    }
    let items = refiner_items(schema, pairs, &cfg.distill)?;
    let ref_engine = Engine::new(reference);
    let mut replay_sampler = BatchSampler::new(replay.len().max(1), cfg.train.seed, "refiner-replay");
    let mut params = reference.clone();
    let mut log = Vec::with_capacity(cfg.train.steps);
    run_sgd(&mut params, &cfg.train, items.len(), "refiner", |step, batch, p| {
        let engine = Engine::new(p);
        let batch_items: Vec<&RefinerItem> = batch.iter().map(|&i| &items[i]).collect();
        let replay_items: Vec<&SeqPair> = if use_replay {
            replay_sampler
                .next_batch(cfg.replay_batch.min(replay.len()))
                .into_iter()
                .map(|i| &replay[i])
                .collect()
        } else {
            Vec::new()
        };
        let (mut rec, grad) = refiner_objective(&engine, &ref_engine, &batch_items, &replay_items, &cfg.distill)?;
        rec.step = step;
        log.push(rec);
        Ok((rec.l_total, grad))
    })?;
    Ok((params, log))
}

/// A document to refine together with the annotations shown to the refiner.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyInput {
    pub doc: Document,
    pub annotations: Vec<FieldAnnotation>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Stage3Report {
    /// Documents whose decode yielded no usable field.
    pub flagged: Vec<String>,
    /// Fields that fell back to the input annotation.
    pub fallback_fields: usize,
    pub total_fields: usize,
}

/// Greedy-decodes the refiner on each correction prompt. A field is taken from
/// the decode when it parses and fits its value space; otherwise the input value
/// is kept. The truth slot of each output record holds the refined annotations.
pub fn stage3_refine(
    schema: &Schema,
    refiner: &PolicyParams,
    inputs: &[NoisyInput],
) -> Result<(Vec<AnnotationRecord>, Stage3Report)> {
    let engine = Engine::new(refiner);
    let mut report = Stage3Report::default();
    let mut out = Vec::with_capacity(inputs.len());
    for input in inputs {
        let prompt = build_prompt(schema, &input.doc, &input.annotations)?;
        let max_len = linearize(schema, &input.annotations)?.len() + 8;
        let decoded = engine.decode(&prompt.tokens, DecodeMode::Greedy, max_len);
        let parsed = parse_response(schema, &decoded);
        let mut used = 0;
        let refined: Vec<FieldAnnotation> = schema
            .fields()
            .iter()
            .zip(&input.annotations)
            .zip(&parsed.values)
            .map(|((f, ann), v)| match v {
                Some(v) if f.space.is_valid(v) => {
                    used += 1;
                    FieldAnnotation {
                        value: v.clone(),
                        confidence: 1.0,
                        ..ann.clone()
                    }
                }
                _ => ann.clone(),
            })
            .collect();
        report.total_fields += schema.len();
        report.fallback_fields += schema.len() - used;
        if used == 0 {
            report.flagged.push(input.doc.doc_id.clone());
        }
        out.push(AnnotationRecord::new(&input.doc, Source::Refined, refined));
    }
    Ok((out, report))
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TlrConfig {
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
}

pub struct TlrOutput {
    pub stage1: Vec<Stage1Pair>,
    pub refiner: PolicyParams,
    pub log: Vec<LossRecord>,
    pub refined: Vec<AnnotationRecord>,
    pub report: Stage3Report,
}

/// All three stages in order.
pub fn run_pipeline(
    schema: &Schema,
    expert_docs: &[Document],
    reference: &PolicyParams,
    replay: &[SeqPair],
    inputs: &[NoisyInput],
    cfg: &TlrConfig,
) -> Result<TlrOutput> {
    let stage1 = stage1_build(schema, expert_docs, &cfg.stage1)?;
    let (refiner, log) = stage2_train_refiner(schema, reference, &stage1, replay, &cfg.stage2)?;
    let (refined, report) = stage3_refine(schema, &refiner, inputs)?;
    Ok(TlrOutput {
        stage1,
        refiner,
        log,
        refined,
        report,
    })
}
