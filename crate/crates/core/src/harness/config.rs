//! Plain-text `key = value` configuration covering every module.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::{default_ablation, AblationSpec, LabConfig};
use crate::grpo::{Aggregation, WeightMode};
use crate::tlr::MergeArity;

/// The full run configuration: the experiment bench plus sweep settings.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub lab: LabConfig,
    /// Ratio used by the `noise` subcommand.
    pub noise_ratio: f64,
    pub ratios: Vec<f64>,
    pub seeds: Vec<u64>,
    pub ablation: Vec<AblationSpec>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            lab: LabConfig::default(),
            noise_ratio: 0.3,
            ratios: vec![0.2, 0.3, 0.5, 0.7],
            seeds: vec![0, 1, 2],
            ablation: default_ablation(),
        }
    }
}

trait Value: Sized {
    fn parse(s: &str) -> Option<Self>;
    fn show(&self) -> String;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse(s: &str) -> Option<Self> {
                s.parse().ok()
            }
            fn show(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
plain_value!(f64, usize, u64, bool);

/// Unit enums spelled as their serde (snake_case) names.
macro_rules! named_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse(s: &str) -> Option<Self> {
                serde_json::from_value(serde_json::Value::String(s.to_string())).ok()
            }
            fn show(&self) -> String {
                match serde_json::to_value(self) {
                    Ok(serde_json::Value::String(s)) => s,
                    _ => unreachable!("unit variants serialize as strings"),
                }
            }
        }
    )*};
}
named_value!(Aggregation, WeightMode, MergeArity);

impl<T: Value> Value for Vec<T> {
    fn parse(s: &str) -> Option<Self> {
        if s.is_empty() {
            return Some(Vec::new());
        }
        s.split(',').map(|p| T::parse(p.trim())).collect()
    }
    fn show(&self) -> String {
        self.iter().map(Value::show).collect::<Vec<_>>().join(",")
    }
}

impl Value for AblationSpec {
    fn parse(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn show(&self) -> String {
        self.to_string()
    }
}

type Check<T> = fn(&T) -> bool;

fn unit(v: &f64) -> bool {
    (0.0..=1.0).contains(v)
}
fn positive(v: &f64) -> bool {
    v.is_finite() && *v > 0.0
}
fn non_negative(v: &f64) -> bool {
    v.is_finite() && *v >= 0.0
}
fn at_least_one(v: &usize) -> bool {
    *v >= 1
}
fn any<T>(_: &T) -> bool {
    true
}
// Range predicates take `&T` for the field's own type.
#[allow(clippy::ptr_arg)]
fn units(v: &Vec<f64>) -> bool {
    v.iter().all(unit)
}
#[allow(clippy::ptr_arg)]
fn non_empty<T>(v: &Vec<T>) -> bool {
    !v.is_empty()
}

struct Entry {
    key: &'static str,
    doc: &'static str,
    range: &'static str,
    get: fn(&Config) -> String,
    set: fn(&mut Config, &str) -> std::result::Result<(), String>,
}

macro_rules! entries {
    ($( $key:literal [$range:literal] $doc:literal => $ty:ty, $check:expr, |$c:ident| $field:expr; )*) => {
        const ENTRIES: &[Entry] = &[$(
            Entry {
                key: $key,
                doc: $doc,
                range: $range,
                get: |$c: &Config| Value::show(&$field),
                set: |$c: &mut Config, s: &str| {
                    let v = <$ty as Value>::parse(s).ok_or_else(|| format!("cannot parse `{s}`"))?;
                    let check: Check<$ty> = $check;
                    if !check(&v) {
                        return Err(format!("{s} is out of range ({})", $range));
                    }
                    $field = v;
                    Ok(())
                },
            },
        )*];
    };
}

entries! {
    "context_window" ["≥ 1"] "Policy context length k" => usize, at_least_one, |c| c.lab.policy.context_window;
    "embed_dim" ["≥ 1"] "Token embedding width" => usize, at_least_one, |c| c.lab.policy.embed_dim;
    "hidden_dim" ["≥ 1"] "Hidden layer width" => usize, at_least_one, |c| c.lab.policy.hidden_dim;
    "corpus_seed" ["any"] "Seed of the shared document corpus" => u64, any, |c| c.lab.corpus_seed;
    "train_docs" ["≥ 1"] "Training split size" => usize, at_least_one, |c| c.lab.train_docs;
    "test_docs" ["≥ 1"] "Held-out test split size" => usize, at_least_one, |c| c.lab.test_docs;
    "expert_docs" ["≥ 1"] "Clean expert set size (refiner supervision, precision SFT)" => usize, at_least_one, |c| c.lab.expert_docs;
    "pretrain_docs" ["≥ 1"] "Reference-policy corpus size (also the replay buffer)" => usize, at_least_one, |c| c.lab.pretrain_docs;
    "ocr.digit_substitution_rate" ["[0, 1]"] "OCR simulator: per-digit substitution" => f64, unit, |c| c.lab.ocr.digit_substitution_rate;
    "ocr.truncation_rate" ["[0, 1]"] "OCR simulator: per-field truncation" => f64, unit, |c| c.lab.ocr.truncation_rate;
    "ocr.field_swap_rate" ["[0, 1]"] "OCR simulator: per same-kind pair swap" => f64, unit, |c| c.lab.ocr.field_swap_rate;
    "ocr.plausible_replacement_rate" ["[0, 1]"] "OCR simulator: per-field plausible replacement" => f64, unit, |c| c.lab.ocr.plausible_replacement_rate;
    "ocr.box_jitter" ["[0, 1]"] "OCR simulator: maximum box coordinate shift" => f64, unit, |c| c.lab.ocr.box_jitter;
    "mllm.digit_substitution_rate" ["[0, 1]"] "MLLM simulator: per-digit substitution" => f64, unit, |c| c.lab.mllm.digit_substitution_rate;
    "mllm.truncation_rate" ["[0, 1]"] "MLLM simulator: per-field truncation" => f64, unit, |c| c.lab.mllm.truncation_rate;
    "mllm.field_swap_rate" ["[0, 1]"] "MLLM simulator: per same-kind pair swap" => f64, unit, |c| c.lab.mllm.field_swap_rate;
    "mllm.plausible_replacement_rate" ["[0, 1]"] "MLLM simulator: per-field plausible replacement" => f64, unit, |c| c.lab.mllm.plausible_replacement_rate;
    "mllm.box_jitter" ["[0, 1]"] "MLLM simulator: maximum box coordinate shift" => f64, unit, |c| c.lab.mllm.box_jitter;
    "pretrain.steps" ["≥ 1"] "Reference pretraining steps" => usize, at_least_one, |c| c.lab.pretrain.steps;
    "pretrain.lr" ["> 0"] "Reference pretraining learning rate" => f64, positive, |c| c.lab.pretrain.lr;
    "pretrain.batch_size" ["≥ 1"] "Reference pretraining batch size" => usize, at_least_one, |c| c.lab.pretrain.batch_size;
    "sft.steps" ["≥ 1"] "SFT steps per stage" => usize, at_least_one, |c| c.lab.sft.steps;
    "sft.lr" ["> 0"] "SFT learning rate" => f64, positive, |c| c.lab.sft.lr;
    "sft.batch_size" ["≥ 1"] "SFT batch size" => usize, at_least_one, |c| c.lab.sft.batch_size;
    "perturb_threshold" ["[0, 1]"] "DynPrompt: a field is perturbed when its draw exceeds this" => f64, unit, |c| c.lab.dyn_prompt.perturb_threshold;
    "mask_vs_replace_ratio" ["[0, 1]"] "DynPrompt: share of perturbations that mask rather than replace" => f64, unit, |c| c.lab.dyn_prompt.mask_vs_replace_ratio;
    "merge_arity" ["merged | all"] "Stage 1: merged pseudo labels only, or both simulators plus merged" => MergeArity, any, |c| c.lab.tlr.stage1.arity;
    "tau" ["> 0"] "KD temperature" => f64, positive, |c| c.lab.tlr.stage2.distill.tau;
    "conf_threshold" ["[0, 1]"] "KD teacher confidence gate" => f64, unit, |c| c.lab.tlr.stage2.distill.conf_threshold;
    "label_smoothing" ["[0, 1)"] "KD teacher label smoothing" => f64, |v: &f64| (0.0..1.0).contains(v), |c| c.lab.tlr.stage2.distill.label_smoothing;
    "alpha" ["≥ 0"] "Weight of L_KD" => f64, non_negative, |c| c.lab.tlr.stage2.distill.alpha;
    "beta_kd" ["≥ 0"] "Weight of L_CLS" => f64, non_negative, |c| c.lab.tlr.stage2.distill.beta_kd;
    "gamma" ["≥ 0"] "Weight of L_SEQ" => f64, non_negative, |c| c.lab.tlr.stage2.distill.gamma;
    "delta" ["≥ 0"] "Weight of L_ALIGN" => f64, non_negative, |c| c.lab.tlr.stage2.distill.delta;
    "epsilon" ["≥ 0"] "Weight of L_SP + L_KLP" => f64, non_negative, |c| c.lab.tlr.stage2.distill.epsilon;
    "align_l1" ["≥ 0"] "Alignment: box L1 weight" => f64, non_negative, |c| c.lab.tlr.stage2.distill.align.l1;
    "align_iou" ["≥ 0"] "Alignment: 1 − IoU weight" => f64, non_negative, |c| c.lab.tlr.stage2.distill.align.iou;
    "align_cls" ["≥ 0"] "Alignment: kind mismatch weight" => f64, non_negative, |c| c.lab.tlr.stage2.distill.align.cls;
    "refiner.steps" ["≥ 1"] "Refiner distillation steps" => usize, at_least_one, |c| c.lab.tlr.stage2.train.steps;
    "refiner.lr" ["> 0"] "Refiner learning rate" => f64, positive, |c| c.lab.tlr.stage2.train.lr;
    "refiner.batch_size" ["≥ 1"] "Refiner batch size" => usize, at_least_one, |c| c.lab.tlr.stage2.train.batch_size;
    "replay_batch" ["≥ 0"] "Replay pairs per refiner step for L_KLP" => usize, any, |c| c.lab.tlr.stage2.replay_batch;
    "refine_ratio" ["[0, 1]"] "Noise ratio of the annotations the refiner corrects" => f64, unit, |c| c.lab.refine_ratio;
    "beta_pref" ["> 0"] "RL preference sharpness β" => f64, positive, |c| c.lab.grpo.beta_pref;
    "kappa" ["≥ 0"] "RL reference-gap correction κ" => f64, non_negative, |c| c.lab.grpo.kappa;
    "lambda_kl" ["≥ 0"] "RL symmetric-KL weight λ" => f64, non_negative, |c| c.lab.grpo.lambda_kl;
    "rl.steps" ["≥ 1"] "RL steps per stage" => usize, at_least_one, |c| c.lab.grpo.steps;
    "rl.lr" ["> 0"] "RL learning rate" => f64, positive, |c| c.lab.grpo.lr;
    "rl.batch_size" ["≥ 1"] "RL batch size" => usize, at_least_one, |c| c.lab.grpo.batch_size;
    "aggregation" ["token | sequence"] "RL loss aggregation for the `rl` subcommand" => Aggregation, any, |c| c.lab.grpo.aggregation;
    "freeze_embeddings" ["true | false"] "Keep the embedding table fixed during RL" => bool, any, |c| c.lab.grpo.freeze_embeddings;
    "candidates" ["≥ 1"] "Sampled candidates per document when building preferences" => usize, at_least_one, |c| c.lab.build.candidates;
    "temperature" ["> 0"] "Candidate sampling temperature" => f64, positive, |c| c.lab.build.temperature;
    "weight_mode" ["mask | policy_prob"] "Token weights w_t" => WeightMode, any, |c| c.lab.build.weight_mode;
    "raw" ["true | false"] "Score raw token strings instead of normalized values" => bool, any, |c| c.lab.raw;
    "noise_ratio" ["[0, 1]"] "Ratio used by the `noise` subcommand" => f64, unit, |c| c.noise_ratio;
    "ratios" ["comma list in [0, 1]"] "Noise sweep ratios" => Vec<f64>, units, |c| c.ratios;
    "seeds" ["non-empty comma list"] "Seeds of the sweep and ablation" => Vec<u64>, non_empty, |c| c.seeds;
    "ablation" ["comma list"] "Ablation configurations, e.g. baseline,tok-grpo->sft+dyn" => Vec<AblationSpec>, non_empty, |c| c.ablation;
}

impl Config {
    pub fn keys() -> impl Iterator<Item = &'static str> {
        ENTRIES.iter().map(|e| e.key)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let e = ENTRIES
            .iter()
            .find(|e| e.key == key)
            .ok_or_else(|| Error::key(key, "unknown key"))?;
        (e.set)(self, value).map_err(|m| Error::key(key, m))
    }

    pub fn get(&self, key: &str) -> Option<String> {
        ENTRIES.iter().find(|e| e.key == key).map(|e| (e.get)(self))
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Config::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
            c.set(k.trim(), v.trim())?;
        }
        c.lab.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Every key with its current value, one per line.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for e in ENTRIES {
            writeln!(out, "{} = {}", e.key, (e.get)(self)).expect("writing to a String");
        }
        out
    }

    /// Markdown table of keys, defaults, ranges and meanings.
    pub fn reference() -> String {
        let d = Config::default();
        let mut out = String::from("| key | default | range | meaning |\n|---|---|---|---|\n");
        for e in ENTRIES {
            writeln!(out, "| `{}` | `{}` | {} | {} |", e.key, (e.get)(&d), e.range, e.doc).expect("writing to a String");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(Config::parse("").unwrap(), Config::default());
        assert_eq!(Config::parse("# only a comment\n\n").unwrap(), Config::default());
    }

    #[test]
    fn range_errors_name_the_key() {
        let e = Config::parse("perturb_threshold = 1.5").unwrap_err();
        assert!(matches!(&e, Error::ConfigKey { key, .. } if key == "perturb_threshold"), "{e}");
        let e = Config::parse("sft.lr = -1").unwrap_err();
        assert!(matches!(&e, Error::ConfigKey { key, .. } if key == "sft.lr"));
        let e = Config::parse("aggregation = sideways").unwrap_err();
        assert!(matches!(&e, Error::ConfigKey { key, .. } if key == "aggregation"));
    }

    #[test]
    fn unknown_and_malformed_lines_rejected() {
        let e = Config::parse("no_such_key = 1").unwrap_err();
        assert!(matches!(&e, Error::ConfigKey { key, .. } if key == "no_such_key"));
        assert!(matches!(Config::parse("just words"), Err(Error::Config(_))));
        assert!(matches!(
            Config::parse("ablation = tok-grpo->banana"),
            Err(Error::ConfigKey { key, .. }) if key == "ablation"
        ));
    }

    #[test]
    fn dump_round_trips() {
        let text = "kappa = 0.75\nratios = 0.1,0.4\nseeds = 5\nweight_mode = policy_prob\nmerge_arity = merged\n\
                    ablation = baseline,sft-clean->tok-grpo\nsft.lr = 0.123456789012345\nraw = true";
        let c = Config::parse(text).unwrap();
        assert_eq!(c.lab.grpo.kappa, 0.75);
        assert_eq!(c.ratios, vec![0.1, 0.4]);
        assert_eq!(c.ablation.len(), 2);
        let again = Config::parse(&c.dump()).unwrap();
        assert_eq!(again, c);
        assert_eq!(Config::parse(&Config::default().dump()).unwrap(), Config::default());
    }

    #[test]
    fn reference_lists_every_key() {
        let r = Config::reference();
        for k in Config::keys() {
            assert!(r.contains(&format!("`{k}`")), "{k}");
        }
        let mut keys: Vec<_> = Config::keys().collect();
        let n = keys.len();
        keys.sort_unstable();
        keys.dedup();
        assert_eq!(keys.len(), n);
    }
}
