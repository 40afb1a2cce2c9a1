mod common;

use common::{expanded, random_log, random_problem, small_config};
use ktl_core::data::KcMapping;
use ktl_core::evaluation::{
    aggregate_by_question, auc, eval_all_in_one, eval_one_by_one, leakage_probe, TraceLevel, Verdict,
};
use ktl_core::expansion::{expand, LabelPolicy};
use ktl_core::{Error, Model, ModelKind};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Exhaustive pairwise count.
fn auc_oracle(p: &[f64], t: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..p.len() {
        for j in 0..p.len() {
            if t[i] && !t[j] {
                den += 1.0;
                if p[i] > p[j] {
                    num += 1.0;
                } else if p[i] == p[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / den
}

#[test]
fn one_by_one_emits_one_entry_per_step() {
    let mapping = KcMapping::new(vec![vec![0, 1, 2], vec![1]], 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut log = random_log(&mut rng, 0, 2, 2);
    log.interactions[0].question = 0;
    log.interactions[1].question = 1;
    let model: Model<f64> = Model::new(small_config(ModelKind::DktMl, 8, 0), 2, 3).unwrap();
    let seq = expand(&log, &mapping, LabelPolicy::GroundTruth).unwrap();
    let trace = eval_one_by_one(&model, &[seq]).unwrap();
    assert_eq!(trace.len(), 4);
    assert_eq!(model.forward_calls(), 1);
    // masked input steps still carry the question's response as target
    assert_eq!(trace.entries[0].target, log.interactions[0].response);
    assert_eq!(trace.entries[1].target, log.interactions[0].response);
}

#[test]
fn all_in_one_matches_aggregated_one_by_one_for_leak_free_models() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..4 {
        let (mapping, _) = random_problem(&mut rng, 10, 7, 3, 1);
        let logs: Vec<_> = (0..3).map(|s| random_log(&mut rng, s, 10, 9)).collect();
        for kind in ModelKind::LEAK_FREE {
            let model: Model<f64> = Model::new(small_config(kind, 8, trial), 10, 7).unwrap();
            let windows: Vec<_> = logs.iter().map(|l| expand(l, &mapping, LabelPolicy::GroundTruth).unwrap()).collect();
            let agg = aggregate_by_question(&eval_one_by_one(&model, &windows).unwrap()).unwrap();
            model.reset_forward_calls();
            let all = eval_all_in_one(&model, &windows).unwrap();
            let expected_calls: usize = windows.iter().map(|w| w.valid_len()).sum();
            assert_eq!(model.forward_calls(), expected_calls, "{kind}");
            assert_eq!(agg.len(), all.len());
            assert_eq!(all.len(), logs.iter().map(|l| l.len()).sum::<usize>());
            for (a, b) in agg.entries.iter().zip(&all.entries) {
                assert_eq!(a.alignment, b.alignment);
                assert!((a.probability - b.probability).abs() <= 1e-6, "{kind}");
            }
        }
    }
}

#[test]
fn single_kc_questions_agree_for_baselines_too() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mapping, log) = random_problem(&mut rng, 6, 6, 1, 10);
    for kind in [ModelKind::Dkt, ModelKind::Akt] {
        let model: Model<f64> = Model::new(small_config(kind, 8, 1), 6, 6).unwrap();
        let seq = expanded(kind, &log, &mapping);
        let agg = aggregate_by_question(&eval_one_by_one(&model, std::slice::from_ref(&seq)).unwrap()).unwrap();
        let all = eval_all_in_one(&model, &[seq]).unwrap();
        for (a, b) in agg.entries.iter().zip(&all.entries) {
            assert!((a.probability - b.probability).abs() <= 1e-12, "{kind}");
        }
    }
}

#[test]
fn baseline_branches_drop_sibling_responses() {
    let mapping = KcMapping::new(vec![vec![0, 1]], 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let log = random_log(&mut rng, 0, 1, 3);
    let model: Model<f64> = Model::new(small_config(ModelKind::Dkt, 8, 1), 1, 2).unwrap();
    let seq = expanded(ModelKind::Dkt, &log, &mapping);
    let all = eval_all_in_one(&model, std::slice::from_ref(&seq)).unwrap();
    let flipped = eval_all_in_one(&model, &[seq.with_flipped_occurrence(2)]).unwrap();
    assert_eq!(all.level, TraceLevel::Question);
    assert_eq!(all.entries[2].probability, flipped.entries[2].probability);
}

#[test]
fn probe_verdicts() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mapping, _) = random_problem(&mut rng, 8, 6, 3, 1);
    let windows: Vec<_> = (0..4).map(|s| expand(&random_log(&mut rng, s, 8, 10), &mapping, LabelPolicy::GroundTruth).unwrap()).collect();
    for kind in ModelKind::LEAK_FREE {
        let model: Model<f64> = Model::new(small_config(kind, 8, 5), 8, 6).unwrap();
        let report = leakage_probe(&model, &windows, 20, 0).unwrap();
        assert_eq!(report.verdict, Verdict::LeakFree, "{kind}: {}", report.max_shift);
        assert!(report.sampled_occurrences > 0);
    }
    let single = KcMapping::new(vec![vec![0]; 8], 6).unwrap();
    let flat: Vec<_> = (0..2).map(|s| expand(&random_log(&mut rng, s, 8, 5), &single, LabelPolicy::GroundTruth).unwrap()).collect();
    let model: Model<f64> = Model::new(small_config(ModelKind::DktMl, 8, 5), 8, 6).unwrap();
    assert!(matches!(leakage_probe(&model, &flat, 5, 0), Err(Error::Inconclusive(_))));
}

#[test]
fn auc_matches_pairwise_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    use rand::Rng;
    for _ in 0..100 {
        let n = rng.random_range(2..=50);
        // coarse grid forces ties
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(0..8) as f64 / 8.0).collect();
        let mut t: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        t[0] = true;
        t[1] = false;
        assert_eq!(auc(&p, &t).unwrap(), auc_oracle(&p, &t));
    }
}

proptest! {
    #[test]
    fn auc_is_rank_invariant(raw in prop::collection::vec((0.0f64..1.0, any::<bool>()), 2..40)) {
        let (p, t): (Vec<f64>, Vec<bool>) = raw.into_iter().unzip();
        prop_assume!(t.iter().any(|&x| x) && t.iter().any(|&x| !x));
        let a = auc(&p, &t).unwrap();
        let q: Vec<f64> = p.iter().map(|x| (3.0 * x).exp() + 1.0).collect();
        prop_assert_eq!(a, auc(&q, &t).unwrap());
        prop_assert_eq!(a, auc_oracle(&p, &t));
    }
}
