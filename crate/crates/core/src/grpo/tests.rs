use rand::Rng as _;

use super::*;
use crate::policy::gradcheck;
use crate::policy::{sequence_logprob, PolicyConfig};
use crate::rng;
use crate::synthdoc::{generate_corpus, merged_pseudo, NoiseProfile, Schema};
use crate::testutil::{random_params, random_tokens, small_config};

fn pair(prompt: Vec<Token>, y_plus: Vec<Token>, y_minus: Vec<Token>, w: Vec<f64>) -> PreferencePair {
    PreferencePair {
        doc_id: "t".into(),
        prompt,
        y_plus,
        y_minus,
        token_weights: w,
        provenance: Provenance::RefinedVsCandidate,
    }
}

fn random_pairs(seed: u64, n: usize) -> Vec<PreferencePair> {
    let mut r = rng::stream(seed, "fixture-pairs", 0);
    (0..n)
        .map(|_| {
            let (lp, lyp, lym) = (r.gen_range(1..6), r.gen_range(1..5), r.gen_range(1..5));
            let prompt = random_tokens(&mut r, lp);
            let yp = random_tokens(&mut r, lyp);
            let mut ym = random_tokens(&mut r, lym);
            if ym == yp {
                ym.push(7);
            }
            let t = yp.len().min(ym.len());
            let w = (0..t).map(|_| if r.gen_bool(0.2) { 0.0 } else { r.gen_range(0.0..1.0) }).collect();
            pair(prompt, yp, ym, w)
        })
        .collect()
}

fn zeros() -> PolicyParams {
    PolicyParams::zeros(small_config(0)).unwrap()
}

fn cfg(beta: f64, kappa: f64, lambda: f64) -> GrpoConfig {
    GrpoConfig {
        beta_pref: beta,
        kappa,
        lambda_kl: lambda,
        ..Default::default()
    }
}

#[test]
fn log_two_at_zero_gap() {
    let z = zeros();
    let p = vec![pair(vec![1, 2], vec![10], vec![20], vec![1.0])];
    let (l, _) = tok_grpo_loss(&z, &z, &p, &cfg(1.0, 0.0, 0.0)).unwrap();
    assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn large_gap_scalar_value() {
    let mut z = zeros();
    let b2 = z.config.layout().b2;
    z.values[b2.start + 10] = 10.0;
    let reference = zeros();
    let p = vec![pair(vec![1], vec![10], vec![20], vec![1.0])];
    let (g, _) = token_gaps(&z, &reference, &p[0]).unwrap();
    assert!((g[0] - 10.0).abs() < 1e-12);
    let (l, _) = tok_grpo_loss(&z, &reference, &p, &cfg(1.0, 0.0, 0.0)).unwrap();
    let want = (1.0 + (-10f64).exp()).ln();
    assert!((l - want).abs() < 1e-15, "{l} vs {want}");
    assert!((l - 4.54e-5).abs() < 1e-7);
}

#[test]
fn full_mask_is_zero() {
    let p = random_params(1, 5.0);
    let mut pairs = random_pairs(1, 5);
    pairs.iter_mut().for_each(|q| q.token_weights.iter_mut().for_each(|w| *w = 0.0));
    for agg in [Aggregation::Token, Aggregation::Sequence] {
        let c = GrpoConfig {
            aggregation: agg,
            ..Default::default()
        };
        let (l, g) = tok_grpo_loss(&p, &random_params(2, 5.0), &pairs, &c).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.values.iter().all(|v| *v == 0.0));
    }
}

#[test]
fn policy_equals_reference_identity() {
    let p = random_params(3, 5.0);
    let pairs = random_pairs(3, 6);
    let (l, _) = rl_objective(&p, &p, &pairs, &cfg(1.3, 1.0, 0.7)).unwrap();
    let want = pairs
        .iter()
        .map(|q| q.token_weights.iter().sum::<f64>() / q.t_eff() as f64 * std::f64::consts::LN_2)
        .sum::<f64>()
        / pairs.len() as f64;
    assert!((l - want).abs() < 1e-12);
    let (kl, g) = kl_stabilization(&p, &p, &pairs).unwrap();
    assert!(kl.abs() < 1e-12);
    assert!(g.norm() < 1e-12);
}

#[test]
fn reduction_to_sigmoid_preference_loss() {
    let mut r = rng::stream(4, "reduction", 0);
    for inst in 0..10 {
        let p = random_params(100 + inst, 5.0);
        let reference = random_params(200 + inst, 5.0);
        let mut pairs = random_pairs(100 + inst, 4);
        pairs.iter_mut().for_each(|q| q.token_weights.iter_mut().for_each(|w| *w = 1.0));
        let beta = r.gen_range(0.1..3.0);
        let (l, _) = tok_grpo_loss(&p, &reference, &pairs, &cfg(beta, 0.0, 0.0)).unwrap();
        let mut want = 0.0;
        for q in &pairs {
            let lp = sequence_logprob(&p, &q.prompt, &q.y_plus).unwrap();
            let lm = sequence_logprob(&p, &q.prompt, &q.y_minus).unwrap();
            let t = q.t_eff();
            let s: f64 = (0..t)
                .map(|i| {
                    let sig = 1.0 / (1.0 + (-beta * (lp[i] - lm[i])).exp());
                    -sig.ln()
                })
                .sum();
            want += s / t as f64 / pairs.len() as f64;
        }
        assert!((l - want).abs() < 1e-10, "{l} vs {want}");
    }
}

#[test]
fn masked_single_token_is_invariant() {
    let p = random_params(5, 5.0);
    let reference = random_params(6, 5.0);
    let a = vec![pair(vec![1, 2], vec![10], vec![20], vec![0.0])];
    let b = vec![pair(vec![1, 2], vec![30], vec![20], vec![0.0])];
    let c = cfg(1.0, 0.5, 0.0);
    assert_eq!(
        tok_grpo_loss(&p, &reference, &a, &c).unwrap().0,
        tok_grpo_loss(&p, &reference, &b, &c).unwrap().0
    );
}

#[test]
fn token_gaps_oracle() {
    let p = random_params(7, 5.0);
    let reference = random_params(8, 5.0);
    for q in random_pairs(7, 20) {
        let (g, gr) = token_gaps(&p, &reference, &q).unwrap();
        let lp = sequence_logprob(&p, &q.prompt, &q.y_plus).unwrap();
        let lm = sequence_logprob(&p, &q.prompt, &q.y_minus).unwrap();
        for t in 0..q.t_eff() {
            assert!((g[t] - (lp[t] - lm[t])).abs() < 1e-12);
        }
        assert_eq!(gr.len(), g.len());
        let (g2, gr2) = token_gaps(&p, &p, &q).unwrap();
        assert_eq!(g2, gr2);
    }
    let q = pair(vec![3], vec![9, 10], vec![9, 11], vec![1.0, 1.0]);
    assert_eq!(token_gaps(&p, &reference, &q).unwrap().0[0], 0.0);
}

fn assert_fd<F: Fn(&PolicyParams) -> f64>(p: &PolicyParams, g: &GradVector, seed: u64, f: F) {
    let rep = gradcheck::check(p, g, 20, 1e-5, seed, &f);
    assert!(rep.max_rel_err <= 1e-4, "{rep:?}");
    let strata = gradcheck::stratified_coords(p, 4, seed);
    let rep = gradcheck::check_coords(p, g, &strata, 1e-5, &f);
    assert!(rep.max_rel_err <= 1e-4, "{rep:?}");
}

#[test]
fn gradients_match_finite_differences() {
    for inst in 0..5 {
        let p = random_params(300 + inst, 5.0);
        let reference = random_params(400 + inst, 5.0);
        let pairs = random_pairs(300 + inst, 3);
        for agg in [Aggregation::Token, Aggregation::Sequence] {
            let c = GrpoConfig {
                aggregation: agg,
                ..cfg(1.5, 0.5, 0.3)
            };
            let (_, g) = tok_grpo_loss(&p, &reference, &pairs, &c).unwrap();
            assert_fd(&p, &g, inst, |q| tok_grpo_loss(q, &reference, &pairs, &c).unwrap().0);
            let (_, g) = rl_objective(&p, &reference, &pairs, &c).unwrap();
            assert_fd(&p, &g, inst, |q| rl_objective(q, &reference, &pairs, &c).unwrap().0);
        }
        let (l, g) = kl_stabilization(&p, &reference, &pairs).unwrap();
        assert!(l >= 0.0);
        assert_fd(&p, &g, inst, |q| kl_stabilization(q, &reference, &pairs).unwrap().0);
    }
}

#[test]
fn rl_objective_is_component_sum() {
    for inst in 0..5 {
        let p = random_params(500 + inst, 5.0);
        let reference = random_params(600 + inst, 5.0);
        let pairs = random_pairs(500 + inst, 4);
        let c0 = cfg(1.0, 0.5, 0.0);
        assert_eq!(
            rl_objective(&p, &reference, &pairs, &c0).unwrap().0,
            tok_grpo_loss(&p, &reference, &pairs, &c0).unwrap().0
        );
        let c = cfg(0.8, 0.3, 2.5);
        let (l, g) = rl_objective(&p, &reference, &pairs, &c).unwrap();
        let (lp, gp) = tok_grpo_loss(&p, &reference, &pairs, &c).unwrap();
        let (lk, gk) = kl_stabilization(&p, &reference, &pairs).unwrap();
        assert!((l - (lp + 2.5 * lk)).abs() < 1e-12);
        let mut want = gp.clone();
        want.add_scaled(&gk, 2.5);
        for (a, b) in g.values.iter().zip(&want.values) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn empty_pairs_rejected() {
    let z = zeros();
    assert!(matches!(tok_grpo_loss(&z, &z, &[], &GrpoConfig::default()), Err(Error::Input(_))));
    assert!(kl_stabilization(&z, &z, &[]).is_err());
    let bad = pair(vec![1], vec![5], vec![5], vec![1.0]);
    assert!(matches!(bad.validate(), Err(Error::Structural(_))));
}

/// Pairs preferring digits over letters, so the preference generalizes.
fn digit_pairs(seed: u64, n: usize) -> Vec<PreferencePair> {
    let mut r = rng::stream(seed, "digit-pairs", 0);
    (0..n)
        .map(|_| {
            let prompt = random_tokens(&mut r, 4);
            let yp = vec![vocab::digit(r.gen_range(0..10)), vocab::EOS];
            let ym = vec![vocab::char_to_token((b'a' + r.gen_range(0..26)) as char).unwrap(), vocab::EOS];
            pair(prompt, yp, ym, vec![1.0, 0.0])
        })
        .collect()
}

#[test]
fn rl_train_raises_heldout_gap_and_is_reproducible() {
    let reference = random_params(9, 1.0);
    let train = digit_pairs(1, 64);
    let held = digit_pairs(2, 32);
    let c = GrpoConfig {
        steps: 150,
        lr: 0.05,
        ..Default::default()
    };
    let before = mean_gap(&reference, &held).unwrap();
    let (a, log) = rl_train(&reference, &reference, &train, &c).unwrap();
    assert_eq!(log.len(), 150);
    let after = mean_gap(&a, &held).unwrap();
    assert!(after > before + 0.1, "{before} -> {after}");
    let (b, log2) = rl_train(&reference, &reference, &train, &c).unwrap();
    assert_eq!(a, b);
    assert_eq!(log, log2);
}

#[test]
fn strong_kl_keeps_policy_near_reference() {
    let reference = random_params(10, 1.0);
    let train = digit_pairs(3, 32);
    let run = |lambda_kl: f64| {
        let c = GrpoConfig {
            steps: 100,
            lr: 2e-5,
            lambda_kl,
            ..Default::default()
        };
        let (p, _) = rl_train(&reference, &reference, &train, &c).unwrap();
        kl_stabilization(&p, &reference, &train).unwrap().0
    };
    let kl_small = run(1e-2);
    let kl_large = run(1e3);
    assert!(kl_large < kl_small, "{kl_large} vs {kl_small}");
}

#[test]
fn frozen_embeddings_stay_put() {
    let reference = random_params(11, 1.0);
    let c = GrpoConfig {
        steps: 5,
        freeze_embeddings: true,
        ..Default::default()
    };
    let (p, _) = rl_train(&reference, &reference, &digit_pairs(4, 8), &c).unwrap();
    let emb = p.config.layout().emb;
    assert_eq!(p.values[emb.clone()], reference.values[emb]);
    assert_ne!(p, reference);
}

#[test]
fn date_validator_rejects_impossible_dates() {
    let s = Schema::invoice();
    let d = &generate_corpus(&s, 1, 5).unwrap()[0];
    let mut ann = d.truth.clone();
    let good = crate::synthdoc::linearize(&s, &ann).unwrap();
    assert!(passes_all(&Validator::ALL, &s, &good));
    let i = s.index_of("date").unwrap();
    ann[i].value = vocab::encode("2024-13-40").unwrap();
    let bad = crate::synthdoc::linearize(&s, &ann).unwrap();
    assert!(!Validator::DateFormat.check(&s, &bad));
    assert!(Validator::KeyPresence.check(&s, &bad));
    let j = s.index_of("total").unwrap();
    ann[j].value = vocab::encode("12a4.50").unwrap();
    assert!(!Validator::AmountFormat.check(&s, &crate::synthdoc::linearize(&s, &ann).unwrap()));
    assert!(!Validator::KeyPresence.check(&s, &good[..good.len() - 1]));
}

fn sources_fixture(n: usize) -> (Schema, Vec<crate::synthdoc::Document>, Vec<crate::synthdoc::PseudoLabelSet>) {
    let s = Schema::invoice();
    let docs = generate_corpus(&s, n, 8).unwrap();
    let pseudo = docs
        .iter()
        .map(|d| merged_pseudo(&s, d, &NoiseProfile::ocr_default(8), &NoiseProfile::mllm_default(8)).unwrap())
        .collect();
    (s, docs, pseudo)
}

#[test]
fn built_pairs_satisfy_invariants() {
    let (s, docs, pseudo) = sources_fixture(100);
    let params = PolicyParams::init(PolicyConfig {
        seed: 3,
        ..Default::default()
    })
    .unwrap();
    let sources: Vec<PreferenceSource> = docs
        .iter()
        .zip(&pseudo)
        .map(|(d, p)| PreferenceSource {
            doc: d,
            pseudo: p,
            refined: &d.truth,
        })
        .collect();
    let c = BuildConfig {
        seed: 4,
        ..Default::default()
    };
    let (pairs, skips) = build_preferences(&s, &sources, &params, &Validator::ALL, &c).unwrap();
    assert_eq!(pairs.len() + skips.skipped, 100);
    for p in &pairs {
        p.validate().unwrap();
        assert_ne!(p.y_plus, p.y_minus);
        for (t, w) in p.token_weights.iter().enumerate() {
            let structural = vocab::key_index(p.y_plus[t]).is_some() || p.y_plus[t] == vocab::EOS;
            assert_eq!(*w, if structural { 0.0 } else { 1.0 });
        }
    }
    // An untrained sampler essentially never emits a valid response.
    assert!(pairs.iter().all(|p| p.provenance == Provenance::Validator));
    let (again, _) = build_preferences(&s, &sources, &params, &Validator::ALL, &c).unwrap();
    assert_eq!(pairs, again);
}

#[test]
fn candidates_equal_to_preferred_are_never_dispreferred() {
    // A policy that always reproduces y⁺ forces the corruption fallback.
    let (s, docs, pseudo) = sources_fixture(3);
    let target = crate::synthdoc::linearize(&s, &docs[0].truth).unwrap();
    let prompt = crate::synthdoc::synthesize_prompt(&s, &docs[0], &pseudo[0]).unwrap().tokens;
    let sources = [PreferenceSource {
        doc: &docs[0],
        pseudo: &pseudo[0],
        refined: &docs[0].truth,
    }];
    let c = BuildConfig {
        temperature: 1e-3,
        ..Default::default()
    };
    // A memorizer trained on the single pair.
    let sp = crate::policy::SeqPair {
        prompt,
        response: target.clone(),
    };
    let tc = crate::policy::TrainConfig {
        steps: 300,
        lr: 0.5,
        batch_size: 1,
        seed: 0,
    };
    let mut params = PolicyParams::init(PolicyConfig::default()).unwrap();
    crate::policy::train_nll(&mut params, &[sp], &tc, "memorize").unwrap();
    let (pairs, _) = build_preferences(&s, &sources, &params, &Validator::ALL, &c).unwrap();
    assert_eq!(pairs.len(), 1);
    assert_eq!(pairs[0].y_plus, target);
    assert_ne!(pairs[0].y_minus, target);
    assert_eq!(pairs[0].provenance, Provenance::Corruption);
}

#[test]
fn invalid_refined_label_swaps_roles() {
    let (s, docs, pseudo) = sources_fixture(1);
    let mut refined = docs[0].truth.clone();
    let i = s.index_of("date").unwrap();
    refined[i].value = vocab::encode("2024-13-40").unwrap();
    let sources = [PreferenceSource {
        doc: &docs[0],
        pseudo: &pseudo[0],
        refined: &refined,
    }];
    let params = PolicyParams::init(PolicyConfig::default()).unwrap();
    let (pairs, skips) = build_preferences(&s, &sources, &params, &Validator::ALL, &BuildConfig::default()).unwrap();
    // Untrained candidates are invalid too, so the document is skipped.
    assert!(pairs.is_empty());
    assert_eq!(skips.skipped, 1);
}

#[test]
fn rl_csv_header() {
    let dir = std::env::temp_dir().join(format!("kvr-grpo-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("rl.csv");
    write_rl_csv(&path, &[RlRecord { step: 1, loss: 0.5, ..Default::default() }]).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("step,loss,l_pref,l_kl,mean_gap\n1,0.5,0,0,0\n"));
    std::fs::remove_dir_all(dir).unwrap();
}
