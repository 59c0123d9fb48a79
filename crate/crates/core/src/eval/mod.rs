pub mod experiment;
pub mod lab;
pub mod metrics;

pub use experiment::{
    ablation, ablation_checks, default_ablation, noise_condition, noise_sweep, refined_condition, run_ablation, run_noise_sweep,
    sweep_checks, AblationSpec, Check, ConditionMean, Report, ReportRow, Stage,
};
pub use lab::{pretrain, Lab, LabConfig, Split, Splits};
pub use metrics::{fmr_macro, fmr_micro, fmr_report, normalize_str, normalize_value, EvalBatch, EvalDoc, EvalField, FmrReport};
