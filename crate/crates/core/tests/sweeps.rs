// SPDX-License-Identifier: MIT OR Apache-2.0

use asc_core::corpus::{build_corpus, BackgroundGenerator, Corpus, CorpusSpec};
use asc_core::harness::{
    induction_probes, induction_task_eval, run_sweep, scale_compare, write_relative_drop_csv, write_scale_csv,
    InductionConfig, SweepData, SweepPlan, SweepResult, UNDEFINED,
};
use asc_core::model::{InterventionSpec, ModelConfig, TransformerWeights};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cfg(n_layers: usize) -> ModelConfig {
    ModelConfig {
        n_layers,
        n_heads: 2,
        d_model: 16,
        d_ff: 32,
        vocab_size: 64,
        max_seq_len: 48,
        layer_norm_eps: 1e-5,
    }
}

fn corpus() -> Corpus {
    build_corpus(&CorpusSpec {
        background: BackgroundGenerator::MarkovChain { order: 2, seed: 21 },
        vocab_size: 64,
        background_tokens: 30_000,
        heldout_tokens: 2_000,
        n_canaries: 6,
        canary_prefix_len: 8,
        canary_suffix_len: 8,
        canary_repetitions: 4,
        n_controls: 6,
        repeat_rate: 0.01,
        seed: 21,
    })
    .unwrap()
}

fn small_plan(n_layers: usize) -> SweepPlan {
    let mut plan = SweepPlan::default_for(n_layers).unwrap();
    plan.perplexity.window = 32;
    plan.perplexity.stride = 32;
    plan.induction = InductionConfig {
        n_probes: 64,
        body_len: 20,
        key_len: 2,
    };
    plan
}

fn sweep(n_layers: usize, seed: u64) -> SweepResult {
    let c = corpus();
    let w = TransformerWeights::init(&cfg(n_layers), seed).unwrap();
    let data = SweepData::from_corpus(cfg(n_layers), w, &c).unwrap();
    run_sweep(&small_plan(n_layers), &data).unwrap()
}

#[test]
fn induction_probes_never_occur_in_training_corpus() {
    let c = corpus();
    let ic = InductionConfig {
        n_probes: 256,
        body_len: 20,
        key_len: 2,
    };
    for p in induction_probes(64, &ic, 4).unwrap() {
        let n = p.tokens.len();
        let found = (0..=c.train.len() - n).any(|i| c.train[i..i + n] == p.tokens[..]);
        assert!(!found, "probe {:?} occurs in the corpus", p.tokens);
    }
}

#[test]
fn untrained_model_is_at_chance_on_induction() {
    let cfg = cfg(2);
    let ic = InductionConfig {
        n_probes: 1024,
        body_len: 20,
        key_len: 2,
    };
    let p = 1.0 / cfg.vocab_size as f64;
    let sigma = (p * (1.0 - p) / ic.n_probes as f64).sqrt();
    for seed in 0..3 {
        let w = TransformerWeights::init(&cfg, seed).unwrap();
        let acc = induction_task_eval(&w, &cfg, &InterventionSpec::vanilla(), &ic, seed).unwrap();
        assert!((acc - p).abs() <= 3.0 * sigma, "seed {seed}: accuracy {acc}, chance {p}, sigma {sigma}");
    }
    let none = InductionConfig { n_probes: 0, ..ic };
    let w = TransformerWeights::init(&cfg, 0).unwrap();
    assert!(induction_task_eval(&w, &cfg, &InterventionSpec::vanilla(), &none, 0).is_err());
}

#[test]
fn sweep_rows_do_not_depend_on_plan_order() {
    let c = corpus();
    let cfg = cfg(4);
    let w = TransformerWeights::init(&cfg, 3).unwrap();
    let data = SweepData::from_corpus(cfg.clone(), w, &c).unwrap();
    let plan = small_plan(4);
    let first = run_sweep(&plan, &data).unwrap();

    let mut shuffled = plan.clone();
    shuffled.interventions[1..].shuffle(&mut ChaCha8Rng::seed_from_u64(5));
    assert_ne!(shuffled.interventions, plan.interventions);
    let second = run_sweep(&shuffled, &data).unwrap();
    for row in &second.rows {
        let orig = first.rows.iter().find(|r| r.intervention == row.intervention).unwrap();
        assert_eq!(serde_json::to_string(orig).unwrap(), serde_json::to_string(row).unwrap());
    }
    let again = run_sweep(&plan, &data).unwrap();
    assert_eq!(
        serde_json::to_vec(first.baseline()).unwrap(),
        serde_json::to_vec(again.baseline()).unwrap()
    );
}

#[test]
fn baseline_row_has_zero_drops() {
    let s = sweep(4, 1);
    let b = s.baseline();
    assert!(b.intervention.is_vanilla());
    assert_eq!(b.rel_drop_language, Some(0.0));
    assert!(!b.exceeds_baseline);
    // A zero baseline makes the drop undefined rather than infinite.
    let mut zeroed = s.clone();
    for r in &mut zeroed.rows {
        r.induction_accuracy = Some(0.0);
        r.rel_drop_reasoning = None;
    }
    let mut csv = Vec::new();
    write_relative_drop_csv(&mut csv, &zeroed).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.lines().skip(1).all(|l| l.contains(UNDEFINED)), "{text}");
}

#[test]
fn scale_compare_aligns_on_normalized_depth() {
    let small = sweep(4, 1);
    let deep = sweep(8, 2);
    let same = scale_compare(&[("a".into(), small.clone()), ("b".into(), small.clone())]).unwrap();
    let (a, b): (Vec<_>, Vec<_>) = same.rows.iter().partition(|r| r.label == "a");
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!((x.layer, x.normalized_depth, x.em_rate, x.heldout_ppl), (y.layer, y.normalized_depth, y.em_rate, y.heldout_ppl));
    }
    assert_eq!(same.gaps[0].memorization_gap, same.gaps[1].memorization_gap);

    let mixed = scale_compare(&[("l4".into(), small.clone()), ("l8".into(), deep)]).unwrap();
    let row = mixed.rows.iter().find(|r| r.label == "l8" && r.layer == 3).unwrap();
    assert_eq!(row.normalized_depth, 0.375);
    assert_eq!(mixed.rows.len(), 12);
    let mut csv = Vec::new();
    write_scale_csv(&mut csv, &mixed).unwrap();
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 13);

    assert!(scale_compare(&[("only".into(), small)]).is_err());
}
