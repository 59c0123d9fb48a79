use std::path::Path;
use std::process::{Command, Output};

use kvrefine_core::harness::Manifest;

const TINY: &str = "train_docs = 6\ntest_docs = 3\nexpert_docs = 3\npretrain_docs = 4\npretrain.steps = 5\n";

fn kvrefine(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kvrefine")).args(args).output().unwrap()
}

fn in_dir(dir: &Path, extra: &[&str]) -> Output {
    let cfg = dir.join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let out = dir.join("out");
    let mut args = vec!["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    kvrefine(&args)
}

#[test]
fn usage_errors_exit_two() {
    let none = kvrefine(&[]);
    assert_eq!(none.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&none.stderr).contains("Usage"));
    assert_eq!(kvrefine(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(kvrefine(&["gen", "--bogus"]).status.code(), Some(2));
    assert_eq!(kvrefine(&["sft", "--data", "dirty"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_one_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "perturb_threshold = 1.5\n").unwrap();
    let out = dir.path().join("out");
    let o = kvrefine(&["--config", bad.to_str().unwrap(), "--out", out.to_str().unwrap(), "gen"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("perturb_threshold"));

    // pretrain before gen: the corpus is missing.
    let o = in_dir(dir.path(), &["pretrain"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("corpus-pretrain.jsonl"));
}

#[test]
fn gen_is_deterministic_and_seeded() {
    let digests = |seed: &str| {
        let dir = tempfile::tempdir().unwrap();
        assert!(in_dir(dir.path(), &["--seed", seed, "gen"]).status.success());
        Manifest::load(&dir.path().join("out/manifest-gen.json")).unwrap().outputs
    };
    let a = digests("5");
    assert_eq!(a.len(), 8);
    assert_eq!(a, digests("5"));
    let c = digests("6");
    // The corpus is shared across seeds; the simulated pseudo labels are not.
    assert_eq!(a["corpus-train.jsonl"], c["corpus-train.jsonl"]);
    assert_ne!(a["pseudo-train.jsonl"], c["pseudo-train.jsonl"]);
}

#[test]
fn writes_stay_inside_out() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in [&["gen"][..], &["noise", "--ratio", "0.5"], &["pretrain"]] {
        assert!(in_dir(dir.path(), cmd).status.success());
    }
    let mut top: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    top.sort();
    assert_eq!(top, ["out", "tiny.cfg"]);
    let noise = Manifest::load(&dir.path().join("out/manifest-noise-0.50.json")).unwrap();
    let gen = Manifest::load(&dir.path().join("out/manifest-gen.json")).unwrap();
    assert_eq!(noise.inputs["corpus-train.jsonl"], gen.outputs["corpus-train.jsonl"]);
    assert!(noise.outputs.contains_key("noisy-0.50.jsonl"));
    assert_eq!(noise.args, ["noise", "--ratio", "0.5"]);
}
