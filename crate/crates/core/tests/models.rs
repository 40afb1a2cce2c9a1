mod common;

use common::{expanded, gradient_check, random_log, random_problem, small_config};
use ktl_core::autodiff::sigmoid;
use ktl_core::data::{Interaction, InteractionLog, KcMapping};
use ktl_core::expansion::{expand, LabelPolicy};
use ktl_core::models::Checkpoint;
use ktl_core::{Model, ModelKind};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn log_of(pairs: &[(usize, bool)]) -> InteractionLog {
    InteractionLog {
        student: 0,
        interactions: pairs
            .iter()
            .enumerate()
            .map(|(i, &(question, response))| Interaction { order: i as u64, question, response })
            .collect(),
    }
}

#[test]
fn outputs_are_probabilities() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mapping, log) = random_problem(&mut rng, 8, 6, 3, 12);
    for kind in ModelKind::ALL {
        let model: Model<f64> = Model::new(small_config(kind, 8, 3), 8, 6).unwrap();
        let seq = expanded(kind, &log, &mapping);
        let p = model.predict(&seq).unwrap();
        assert_eq!(p.len(), seq.len(), "{kind}");
        assert!(p.iter().all(|&x| x > 0.0 && x < 1.0), "{kind}");
    }
}

#[test]
fn predictions_are_causal() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for trial in 0..5 {
        let (mapping, log) = random_problem(&mut rng, 8, 6, 3, 10);
        for kind in ModelKind::ALL {
            let model: Model<f64> = Model::new(small_config(kind, 8, trial), 8, 6).unwrap();
            let seq = expanded(kind, &log, &mapping);
            let base = model.predict(&seq).unwrap();
            for g in seq.groups() {
                let flipped = model.predict(&seq.with_flipped_occurrence(g.occurrence)).unwrap();
                for t in 0..g.start {
                    assert_eq!(base[t], flipped[t], "{kind}: step {t} saw occurrence {}", g.occurrence);
                }
            }
        }
    }
}

#[test]
fn leak_free_models_ignore_sibling_responses() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..10 {
        let (mapping, log) = random_problem(&mut rng, 10, 8, 4, 12);
        for kind in ModelKind::LEAK_FREE {
            let model: Model<f64> = Model::new(small_config(kind, 8, trial), 10, 8).unwrap();
            let seq = expanded(kind, &log, &mapping);
            let base = model.predict(&seq).unwrap();
            for g in seq.groups() {
                let flipped = model.predict(&seq.with_flipped_occurrence(g.occurrence)).unwrap();
                for t in g.range() {
                    assert!((base[t] - flipped[t]).abs() <= 1e-12, "{kind} occurrence {} step {t}", g.occurrence);
                }
            }
        }
    }
}

#[test]
fn baselines_do_leak() {
    let mapping = KcMapping::new(vec![vec![0, 1, 2]], 3).unwrap();
    let log = log_of(&[(0, true), (0, false)]);
    for kind in [ModelKind::Dkt, ModelKind::Akt] {
        let model: Model<f64> = Model::new(small_config(kind, 8, 0), 1, 3).unwrap();
        let seq = expanded(kind, &log, &mapping);
        let a = model.predict(&seq).unwrap();
        let b = model.predict(&seq.with_flipped_occurrence(1)).unwrap();
        assert!((a[4] - b[4]).abs() > 1e-9, "{kind}");
        assert!((a[5] - b[5]).abs() > 1e-9, "{kind}");
    }
}

#[test]
fn dkt_first_step_reads_initial_state_only() {
    let mapping = KcMapping::new(vec![vec![0], vec![1]], 2).unwrap();
    let model: Model<f64> = Model::new(small_config(ModelKind::Dkt, 8, 4), 2, 2).unwrap();
    let bias = model.params().get(model.params().id("output.bias").unwrap()).data.clone();
    for (q, r) in [(0, true), (0, false), (1, true)] {
        let seq = expanded(ModelKind::Dkt, &log_of(&[(q, r)]), &mapping);
        assert_eq!(model.predict(&seq).unwrap(), vec![sigmoid(bias[q])]);
    }
}

#[test]
fn autoregressive_equals_plain_without_multi_kc_questions() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mapping, log) = random_problem(&mut rng, 6, 6, 1, 15);
    let plain: Model<f64> = Model::new(small_config(ModelKind::Dkt, 8, 9), 6, 6).unwrap();
    let mut cfg = small_config(ModelKind::DktAd, 8, 9);
    cfg.seed = 9;
    let ad = Model::from_params(cfg, 6, 6, plain.params().clone()).unwrap();
    let seq = expand(&log, &mapping, LabelPolicy::GroundTruth).unwrap();
    assert_eq!(plain.predict(&seq).unwrap(), ad.predict(&seq).unwrap());
}

#[test]
fn fused_model_scores_siblings_from_one_state() {
    let mapping = KcMapping::new(vec![vec![0, 1], vec![2], vec![0, 2]], 3).unwrap();
    let log = log_of(&[(0, true), (1, false), (2, true)]);
    let model: Model<f64> = Model::new(small_config(ModelKind::DktFuse, 8, 6), 3, 3).unwrap();
    let seq = expanded(ModelKind::DktFuse, &log, &mapping);
    let p = model.predict(&seq).unwrap();
    let bias = model.params().get(model.params().id("output.bias").unwrap()).data.clone();
    // nothing precedes the first occurrence
    assert_eq!(p[0], sigmoid(bias[0]));
    assert_eq!(p[1], sigmoid(bias[1]));
    // the third occurrence sees both earlier questions, each once
    let longer = log_of(&[(0, true), (1, false), (2, true), (1, true)]);
    let q = model.predict(&expanded(ModelKind::DktFuse, &longer, &mapping)).unwrap();
    assert_eq!(&q[..5], &p[..]);
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mapping, log) = random_problem(&mut rng, 6, 5, 3, 6);
    for kind in ModelKind::ALL {
        let mut model: Model<f64> = Model::new(small_config(kind, 4, 11), 6, 5).unwrap();
        let seq = expanded(kind, &log, &mapping);
        let worst = gradient_check(&mut model, &seq, &mut rng, 12, 1e-4);
        assert!(worst <= 1e-3, "{kind}: relative error {worst}");
    }
}

#[test]
fn f32_and_f64_agree_roughly() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mapping, log) = random_problem(&mut rng, 6, 5, 3, 8);
    for kind in ModelKind::ALL {
        let a: Model<f64> = Model::new(small_config(kind, 8, 2), 6, 5).unwrap();
        let b: Model<f32> = Model::new(small_config(kind, 8, 2), 6, 5).unwrap();
        let seq = expanded(kind, &log, &mapping);
        for (x, y) in a.predict(&seq).unwrap().iter().zip(b.predict(&seq).unwrap()) {
            assert!((x - y as f64).abs() < 1e-4, "{kind}");
        }
    }
}

#[test]
fn checkpoint_reload_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mapping, log) = random_problem(&mut rng, 6, 5, 3, 8);
    let dir = tempfile::tempdir().unwrap();
    for kind in ModelKind::ALL {
        let model: Model<f64> = Model::new(small_config(kind, 8, 12), 6, 5).unwrap();
        let path = dir.path().join(format!("{kind}.json"));
        Checkpoint::from_model(&model, 100, Default::default()).save(&path).unwrap();
        let back: Model<f64> = Checkpoint::load(&path).unwrap().to_model().unwrap();
        let seq = expanded(kind, &log, &mapping);
        let a = model.predict(&seq).unwrap();
        let b = back.predict(&seq).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()), "{kind}");
    }
}

#[test]
fn forward_counter_counts_passes() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let log = random_log(&mut rng, 0, 3, 5);
    let mapping = KcMapping::new(vec![vec![0], vec![1], vec![0, 1]], 2).unwrap();
    let model: Model<f64> = Model::new(small_config(ModelKind::Dkt, 4, 0), 3, 2).unwrap();
    let seq = expanded(ModelKind::Dkt, &log, &mapping);
    model.predict(&seq).unwrap();
    model.predict(&seq).unwrap();
    assert_eq!(model.forward_calls(), 2);
    model.reset_forward_calls();
    assert_eq!(model.forward_calls(), 0);
}
