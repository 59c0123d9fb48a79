//! Cross-module runs on a deliberately small lab.

use kvrefine_core::eval::{
    ablation, noise_condition, noise_sweep, refined_condition, AblationSpec, Lab, LabConfig, Splits,
};
use kvrefine_core::policy::{checkpoint, TrainConfig};
use kvrefine_core::synthdoc::io::{read_jsonl, write_jsonl, AnnotationRecord};
use kvrefine_core::synthdoc::{Document, Schema};
use kvrefine_core::Error;

fn tiny() -> LabConfig {
    let mut cfg = LabConfig {
        train_docs: 12,
        test_docs: 5,
        expert_docs: 4,
        pretrain_docs: 8,
        ..Default::default()
    };
    let quick = |steps| TrainConfig {
        steps,
        lr: 0.15,
        batch_size: 4,
        seed: 0,
    };
    cfg.pretrain = quick(30);
    cfg.sft = quick(10);
    cfg.tlr.stage2.train = quick(10);
    cfg.grpo.steps = 5;
    cfg
}

#[test]
fn degenerate_sweep_is_clean_sft() {
    let cfg = tiny();
    let mut labs = vec![Lab::new(&cfg, 1).unwrap()];
    let report = noise_sweep(&mut labs, &[0.0]).unwrap();
    assert_eq!(report.rows.len(), 2);
    assert_eq!(report.rows[0].condition, noise_condition(0.0));
    assert_eq!(report.rows[1].condition, refined_condition(0.3));
    let lab = &labs[0];
    let clean = lab.sft(&lab.reference, &lab.train, &lab.train.truth(), false, "noisy-0.00").unwrap().0;
    assert_eq!(report.rows[0].fmr_micro, lab.evaluate(&clean).unwrap().micro);
}

#[test]
fn sweep_rows_and_determinism() {
    let cfg = tiny();
    let run = || {
        let mut labs: Vec<Lab> = [0, 1].iter().map(|&s| Lab::new(&cfg, s).unwrap()).collect();
        noise_sweep(&mut labs, &[0.2, 0.7]).unwrap()
    };
    let a = run();
    assert_eq!(a.rows.len(), (2 + 1) * 2);
    assert_eq!(a.seeds, vec![0, 1]);
    // Grouped by condition, seeds in order.
    let conds: Vec<&str> = a.rows.iter().map(|r| r.condition.as_str()).collect();
    assert_eq!(conds, ["noisy-0.20", "noisy-0.20", "noisy-0.70", "noisy-0.70", "refined-0.30", "refined-0.30"]);
    assert!(a.rows.iter().all(|r| r.error.is_none() && (0.0..=1.0).contains(&r.fmr_micro)));
    assert_eq!(a, run());
}

#[test]
fn out_of_range_ratio_is_rejected() {
    let mut labs = vec![Lab::new(&tiny(), 0).unwrap()];
    assert!(matches!(noise_sweep(&mut labs, &[1.5]), Err(Error::ConfigKey { .. })));
}

#[test]
fn ablation_rows_and_baseline_identity() {
    let cfg = tiny();
    let specs: Vec<AblationSpec> = ["baseline", "sft-clean", "tok-grpo->sft+dyn"]
        .iter()
        .map(|s| s.parse().unwrap())
        .collect();
    let mut labs = vec![Lab::new(&cfg, 2).unwrap()];
    let report = ablation(&mut labs, &specs);
    assert_eq!(report.rows.len(), specs.len());
    let lab = &labs[0];
    let base = lab.evaluate(&lab.reference).unwrap();
    assert_eq!(report.rows[0].fmr_micro, base.micro);
    assert_eq!(report.rows[0].fmr_macro, base.macro_);
    assert_eq!(report, ablation(&mut [Lab::new(&cfg, 2).unwrap()], &specs));
}

#[test]
fn ablation_names_round_trip() {
    for name in [
        "baseline",
        "sft-clean",
        "sft-refined+dyn",
        "vanilla-rl->sft",
        "sft-clean->tok-grpo",
        "tok-grpo->sft+dyn",
        "sft-refined->vanilla-rl",
    ] {
        let spec: AblationSpec = name.parse().unwrap();
        assert_eq!(spec.to_string(), name);
    }
    for bad in ["", "sft", "tok-grpo+dyn", "baseline+dyn", "a->b", "sft-clean->sft-refined", "tok-grpo->sft->sft"] {
        assert!(
            matches!(bad.parse::<AblationSpec>(), Err(Error::ConfigKey { .. })),
            "{bad}"
        );
    }
}

#[test]
fn lab_from_files_matches_generated_lab() {
    let cfg = tiny();
    let schema = Schema::invoice();
    let splits = Splits::generate(&schema, &cfg, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut read_back = Vec::new();
    for (name, split) in [("train", &splits.train), ("test", &splits.test)] {
        let docs = dir.path().join(format!("corpus-{name}.jsonl"));
        let pseudo = dir.path().join(format!("pseudo-{name}.jsonl"));
        write_jsonl(&docs, &split.docs).unwrap();
        let records: Vec<_> = split
            .docs
            .iter()
            .zip(&split.pseudo)
            .map(|(d, p)| AnnotationRecord::from_pseudo(d, p))
            .collect();
        write_jsonl(&pseudo, &records).unwrap();
        let docs: Vec<Document> = read_jsonl(&docs).unwrap();
        let records: Vec<AnnotationRecord> = read_jsonl(&pseudo).unwrap();
        let pseudo = records.iter().map(|r| r.to_pseudo().unwrap()).collect();
        let again = kvrefine_core::eval::Split::from_parts(&schema, docs, pseudo).unwrap();
        assert_eq!(again.prompts, split.prompts);
        read_back.push(again);
    }
    let lab = Lab::new(&cfg, 3).unwrap();
    let ckpt = dir.path().join("reference.ckpt");
    checkpoint::save(&ckpt, &lab.reference).unwrap();
    assert_eq!(checkpoint::load(&ckpt).unwrap(), lab.reference);
    let rebuilt = Lab::from_parts(&cfg, 3, schema, splits, lab.reference.clone()).unwrap();
    assert_eq!(rebuilt.noisy_targets(0.5).unwrap(), lab.noisy_targets(0.5).unwrap());
    assert_eq!(rebuilt.evaluate(&lab.reference).unwrap(), lab.evaluate(&lab.reference).unwrap());
}
