//! The experiment bench: a fixed synthetic split, a pretrained reference per
//! seed, and the post-training recipes the noise sweep and ablation compose.

use serde::{Deserialize, Serialize};

use super::metrics::{fmr_report, EvalBatch, FmrReport};
use crate::error::{Error, Result};
use crate::grpo::{build_preferences, rl_train, Aggregation, RlRecord, BuildConfig, GrpoConfig, PreferenceSource, Validator};
use crate::policy::{pretrain_reference, DecodeMode, Engine, PolicyConfig, PolicyParams, SeqPair, TrainConfig, TrainLog};
use crate::rng::derive_seed;
use crate::sft::{sft_train, DynPromptConfig, SftItem, SftLog};
use crate::synthdoc::{
    generate_corpus, inject_annotation_noise, linearize, merged_pseudo, synthesize_prompt, Document, FieldAnnotation,
    NoiseProfile, Prompt, PseudoLabelSet, Schema,
};
use crate::tlr::{run_pipeline, NoisyInput, Stage3Report, TlrConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabConfig {
    pub policy: PolicyConfig,
    /// The document corpus is shared by all seeds.
    pub corpus_seed: u64,
    pub train_docs: usize,
    pub test_docs: usize,
    /// Small clean set: refiner supervision and the precision SFT stage.
    pub expert_docs: usize,
    /// Separate clean corpus for the reference policy and the replay buffer.
    pub pretrain_docs: usize,
    pub ocr: NoiseProfile,
    pub mllm: NoiseProfile,
    pub pretrain: TrainConfig,
    pub sft: TrainConfig,
    pub dyn_prompt: DynPromptConfig,
    pub tlr: TlrConfig,
    /// Noise ratio of the annotations the refiner corrects.
    pub refine_ratio: f64,
    pub grpo: GrpoConfig,
    pub build: BuildConfig,
    /// Compare raw token strings instead of normalized values.
    pub raw: bool,
}

impl Default for LabConfig {
    fn default() -> Self {
        let mut tlr = TlrConfig::default();
        tlr.stage2.train = TrainConfig {
            steps: 2000,
            lr: 0.15,
            batch_size: 8,
            seed: 0,
        };
        LabConfig {
            policy: PolicyConfig::default(),
            corpus_seed: 2024,
            train_docs: 700,
            test_docs: 100,
            expert_docs: 100,
            pretrain_docs: 300,
            ocr: NoiseProfile::ocr_default(0),
            mllm: NoiseProfile::mllm_default(0),
            pretrain: TrainConfig {
                steps: 600,
                lr: 0.15,
                batch_size: 8,
                seed: 0,
            },
            sft: TrainConfig {
                steps: 1500,
                lr: 0.15,
                batch_size: 8,
                seed: 0,
            },
            dyn_prompt: DynPromptConfig::default(),
            tlr,
            refine_ratio: 0.3,
            grpo: GrpoConfig {
                steps: 1000,
                lr: 0.1,
                // Summed reference gaps saturate the sequence-level sigmoid at
                // κ<1; κ=1 starts both aggregations at x=0.
                kappa: 1.0,
                beta_pref: 1.0,
                ..Default::default()
            },
            build: BuildConfig::default(),
            raw: false,
        }
    }
}

impl LabConfig {
    /// The TLR configuration with stage seeds derived from `seed`.
    pub fn tlr_for(&self, seed: u64) -> TlrConfig {
        let mut t = self.tlr.clone();
        t.stage1.seed = derive_seed(seed, "lab/stage1", 0);
        t.stage2.train.seed = derive_seed(seed, "lab/stage2", 0);
        t
    }

    pub fn validate(&self) -> Result<()> {
        self.policy.validate()?;
        for (k, n) in [
            ("train_docs", self.train_docs),
            ("test_docs", self.test_docs),
            ("expert_docs", self.expert_docs),
            ("pretrain_docs", self.pretrain_docs),
        ] {
            if n == 0 {
                return Err(Error::key(k, "must be at least 1"));
            }
        }
        if !(0.0..=1.0).contains(&self.refine_ratio) {
            return Err(Error::key("refine_ratio", format!("{} outside [0, 1]", self.refine_ratio)));
        }
        self.ocr.validate()?;
        self.mllm.validate()?;
        self.pretrain.validate()?;
        self.sft.validate()?;
        self.dyn_prompt.validate()?;
        self.tlr.stage2.distill.validate()?;
        self.tlr.stage2.train.validate()?;
        self.grpo.validate()
    }
}

/// Documents with their simulator pseudo labels and task prompts.
#[derive(Debug, Clone)]
pub struct Split {
    pub docs: Vec<Document>,
    pub pseudo: Vec<PseudoLabelSet>,
    pub prompts: Vec<Prompt>,
}

impl Split {
    /// Builds prompts from documents and their pseudo labels.
    pub fn from_parts(schema: &Schema, docs: Vec<Document>, pseudo: Vec<PseudoLabelSet>) -> Result<Self> {
        if docs.len() != pseudo.len() {
            return Err(Error::structural(format!(
                "{} documents with {} pseudo-label sets",
                docs.len(),
                pseudo.len()
            )));
        }
        let prompts = docs
            .iter()
            .zip(&pseudo)
            .map(|(d, p)| synthesize_prompt(schema, d, p))
            .collect::<Result<Vec<_>>>()?;
        Ok(Split { docs, pseudo, prompts })
    }

    fn simulate(schema: &Schema, docs: Vec<Document>, ocr: &NoiseProfile, mllm: &NoiseProfile) -> Result<Self> {
        let pseudo = docs
            .iter()
            .map(|d| merged_pseudo(schema, d, ocr, mllm))
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(schema, docs, pseudo)
    }

    /// Truth with `round(ratio · N)` fields corrupted; the stream depends on
    /// the run seed and the ratio.
    pub fn noisy_targets(&self, schema: &Schema, seed: u64, ratio: f64) -> Result<Vec<Vec<FieldAnnotation>>> {
        let seed = derive_seed(seed, "lab/noise", (ratio * 1e6).round() as u64);
        Ok(inject_annotation_noise(schema, &self.truth(), ratio, seed)?.annotations)
    }

    pub fn truth(&self) -> Vec<Vec<FieldAnnotation>> {
        self.docs.iter().map(|d| d.truth.clone()).collect()
    }

    pub fn seq_pairs(&self, schema: &Schema, targets: &[Vec<FieldAnnotation>]) -> Result<Vec<SeqPair>> {
        self.prompts
            .iter()
            .zip(targets)
            .map(|(p, t)| {
                Ok(SeqPair {
                    prompt: p.tokens.clone(),
                    response: linearize(schema, t)?,
                })
            })
            .collect()
    }
}

/// The four document splits of one seed.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Split,
    pub test: Split,
    pub expert: Split,
    pub pretrain: Split,
}

impl Splits {
    /// Generates the shared corpus and simulates pseudo labels with seed-derived
    /// annotator streams.
    pub fn generate(schema: &Schema, cfg: &LabConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let total = cfg.train_docs + cfg.test_docs + cfg.expert_docs + cfg.pretrain_docs;
        let mut docs = generate_corpus(schema, total, cfg.corpus_seed)?;
        let pretrain = docs.split_off(total - cfg.pretrain_docs);
        let expert = docs.split_off(cfg.train_docs + cfg.test_docs);
        let test = docs.split_off(cfg.train_docs);
        let ocr = NoiseProfile {
            seed: derive_seed(seed, "lab/ocr", 0),
            ..cfg.ocr.clone()
        };
        let mllm = NoiseProfile {
            seed: derive_seed(seed, "lab/mllm", 0),
            ..cfg.mllm.clone()
        };
        Ok(Splits {
            train: Split::simulate(schema, docs, &ocr, &mllm)?,
            test: Split::simulate(schema, test, &ocr, &mllm)?,
            expert: Split::simulate(schema, expert, &ocr, &mllm)?,
            pretrain: Split::simulate(schema, pretrain, &ocr, &mllm)?,
        })
    }
}

/// The reference policy: SGD on the clean pretraining split.
pub fn pretrain(schema: &Schema, cfg: &LabConfig, seed: u64, split: &Split) -> Result<(PolicyParams, TrainLog)> {
    pretrain_reference(
        PolicyConfig {
            seed: derive_seed(seed, "lab/init", 0),
            ..cfg.policy
        },
        &split.seq_pairs(schema, &split.truth())?,
        &TrainConfig {
            seed: derive_seed(seed, "lab/pretrain", 0),
            ..cfg.pretrain
        },
    )
}

/// Everything one seed's experiments share.
pub struct Lab {
    pub cfg: LabConfig,
    pub seed: u64,
    pub schema: Schema,
    pub train: Split,
    pub test: Split,
    pub expert: Split,
    pub pretrain_pairs: Vec<SeqPair>,
    pub reference: PolicyParams,
    refined: Option<(Vec<Vec<FieldAnnotation>>, Stage3Report)>,
}

impl Lab {
    pub fn new(cfg: &LabConfig, seed: u64) -> Result<Self> {
        let schema = Schema::invoice();
        let splits = Splits::generate(&schema, cfg, seed)?;
        let (reference, _) = pretrain(&schema, cfg, seed, &splits.pretrain)?;
        Self::from_parts(cfg, seed, schema, splits, reference)
    }

    pub fn from_parts(cfg: &LabConfig, seed: u64, schema: Schema, splits: Splits, reference: PolicyParams) -> Result<Self> {
        cfg.validate()?;
        let pretrain_pairs = splits.pretrain.seq_pairs(&schema, &splits.pretrain.truth())?;
        Ok(Lab {
            cfg: cfg.clone(),
            seed,
            schema,
            train: splits.train,
            test: splits.test,
            expert: splits.expert,
            pretrain_pairs,
            reference,
            refined: None,
        })
    }

    /// Train-split annotations with `round(ratio · N)` fields corrupted.
    pub fn noisy_targets(&self, ratio: f64) -> Result<Vec<Vec<FieldAnnotation>>> {
        self.train.noisy_targets(&self.schema, self.seed, ratio)
    }

    pub fn tlr_config(&self) -> TlrConfig {
        self.cfg.tlr_for(self.seed)
    }

    /// Pairs train documents with annotations for the refiner.
    pub fn noisy_inputs(&self, annotations: Vec<Vec<FieldAnnotation>>) -> Vec<NoisyInput> {
        self.train
            .docs
            .iter()
            .zip(annotations)
            .map(|(doc, annotations)| NoisyInput {
                doc: doc.clone(),
                annotations,
            })
            .collect()
    }

    /// Refined Data for the train split: the refiner corrects the annotations
    /// at `refine_ratio` noise. Computed once per lab.
    pub fn refined_targets(&mut self) -> Result<&[Vec<FieldAnnotation>]> {
        if self.refined.is_none() {
            let inputs = self.noisy_inputs(self.noisy_targets(self.cfg.refine_ratio)?);
            let out = run_pipeline(
                &self.schema,
                &self.expert.docs,
                &self.reference,
                &self.pretrain_pairs,
                &inputs,
                &self.tlr_config(),
            )?;
            let refined = out.refined.into_iter().map(|r| r.truth).collect();
            self.refined = Some((refined, out.report));
        }
        Ok(&self.refined.as_ref().expect("set above").0)
    }

    /// Supplies Refined Data produced elsewhere.
    pub fn set_refined(&mut self, targets: Vec<Vec<FieldAnnotation>>, report: Stage3Report) -> Result<()> {
        if targets.len() != self.train.docs.len() {
            return Err(Error::structural(format!(
                "{} refined annotation sets for {} train documents",
                targets.len(),
                self.train.docs.len()
            )));
        }
        self.refined = Some((targets, report));
        Ok(())
    }

    pub fn refine_report(&self) -> Option<&Stage3Report> {
        self.refined.as_ref().map(|r| &r.1)
    }

    /// SFT from `initial` on `split` prompts with `targets`.
    pub fn sft(
        &self,
        initial: &PolicyParams,
        split: &Split,
        targets: &[Vec<FieldAnnotation>],
        dyn_prompt: bool,
        tag: &str,
    ) -> Result<(PolicyParams, SftLog)> {
        let items = split
            .prompts
            .iter()
            .zip(targets)
            .map(|(p, t)| {
                Ok(SftItem {
                    prompt: p.clone(),
                    response: linearize(&self.schema, t)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let dc = if dyn_prompt {
            DynPromptConfig {
                seed: derive_seed(self.seed, &format!("lab/dyn/{tag}"), 0),
                ..self.cfg.dyn_prompt
            }
        } else {
            DynPromptConfig::disabled()
        };
        let tc = TrainConfig {
            seed: derive_seed(self.seed, &format!("lab/sft/{tag}"), 0),
            ..self.cfg.sft
        };
        sft_train(initial, &self.schema, &items, &dc, &tc)
    }

    /// Preference RL on the train split with refined `targets` as `y⁺`,
    /// anchored to `initial`.
    pub fn rl(
        &self,
        initial: &PolicyParams,
        targets: &[Vec<FieldAnnotation>],
        aggregation: Aggregation,
        tag: &str,
    ) -> Result<(PolicyParams, Vec<RlRecord>)> {
        let sources: Vec<PreferenceSource> = self
            .train
            .docs
            .iter()
            .zip(&self.train.pseudo)
            .zip(targets)
            .map(|((doc, pseudo), refined)| PreferenceSource { doc, pseudo, refined })
            .collect();
        let bc = BuildConfig {
            seed: derive_seed(self.seed, &format!("lab/build/{tag}"), 0),
            ..self.cfg.build
        };
        let (pairs, _) = build_preferences(&self.schema, &sources, initial, &Validator::ALL, &bc)?;
        if pairs.is_empty() {
            return Err(Error::config("rl: no preference pairs could be built"));
        }
        let gc = GrpoConfig {
            aggregation,
            seed: derive_seed(self.seed, &format!("lab/rl/{tag}"), 0),
            ..self.cfg.grpo
        };
        rl_train(initial, initial, &pairs, &gc)
    }

    /// Greedy decoding on the test split, scored against truth.
    pub fn evaluate(&self, params: &PolicyParams) -> Result<FmrReport> {
        let engine = Engine::new(params);
        let max_len = linearize(&self.schema, &self.test.docs[0].truth)?.len() + 8;
        let responses: Vec<_> = self
            .test
            .prompts
            .iter()
            .map(|p| engine.decode(&p.tokens, DecodeMode::Greedy, max_len))
            .collect();
        let batch = EvalBatch::from_responses(&self.schema, &self.test.docs, &responses)?;
        fmr_report(&batch, self.cfg.raw)
    }

    /// Field accuracy of annotations against the train truth, as FMR.
    pub fn label_fmr(&self, annotations: &[Vec<FieldAnnotation>]) -> Result<FmrReport> {
        let batch = EvalBatch::from_annotations(&self.train.docs, annotations)?;
        fmr_report(&batch, self.cfg.raw)
    }
}
