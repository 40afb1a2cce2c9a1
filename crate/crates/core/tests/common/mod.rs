#![allow(dead_code)]

use ktl_core::data::{Interaction, InteractionLog, KcMapping};
use ktl_core::expansion::{expand, ExpandedSequence};
use ktl_core::{Model, ModelConfig, ModelKind};
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn small_config(kind: ModelKind, d: usize, seed: u64) -> ModelConfig {
    let mut cfg = ModelConfig::new(kind);
    cfg.d = d;
    cfg.hidden = d;
    cfg.attention_blocks = 1;
    cfg.attention_heads = 2;
    cfg.dropout = 0.0;
    cfg.seed = seed;
    cfg
}

/// Random question to KC map with sets of 1..=max_kcs, and one random log.
pub fn random_problem(
    rng: &mut ChaCha8Rng,
    num_questions: usize,
    num_kcs: usize,
    max_kcs: usize,
    questions_per_student: usize,
) -> (KcMapping, InteractionLog) {
    let entries = (0..num_questions)
        .map(|_| {
            let k = rng.random_range(1..=max_kcs.min(num_kcs));
            sample(rng, num_kcs, k).into_vec()
        })
        .collect();
    let mapping = KcMapping::new(entries, num_kcs).unwrap();
    let log = random_log(rng, 0, num_questions, questions_per_student);
    (mapping, log)
}

pub fn random_log(rng: &mut ChaCha8Rng, student: usize, num_questions: usize, len: usize) -> InteractionLog {
    InteractionLog {
        student,
        interactions: (0..len)
            .map(|i| Interaction {
                order: i as u64,
                question: rng.random_range(0..num_questions),
                response: rng.random_bool(0.5),
            })
            .collect(),
    }
}

pub fn expanded(kind: ModelKind, log: &InteractionLog, mapping: &KcMapping) -> ExpandedSequence {
    expand(log, mapping, kind.label_policy()).unwrap()
}

/// Perturb random parameters of `model`, run the gradient check on `window`
/// and return the worst relative error seen. The difficulty parameters are
/// moved off zero first so the Rasch variation paths carry gradient.
pub fn gradient_check(model: &mut Model<f64>, window: &ExpandedSequence, rng: &mut ChaCha8Rng, per_tensor: usize, h: f64) -> f64 {
    if let Some(mu) = model.params().id("rasch.difficulty") {
        for x in model.params_mut().get_mut(mu).data.iter_mut() {
            *x = rng.random_range(-1.0..1.0);
        }
    }
    let (_, _, grads) = model.loss_and_grads(window, None).unwrap();
    let loss = |m: &Model<f64>| m.loss_and_grads(window, None).unwrap().0;
    let ids: Vec<_> = model.params().iter().map(|(id, name, t)| (id, name.to_string(), t.data.len())).collect();
    let mut worst: f64 = 0.0;
    for (id, name, len) in ids {
        let picks: Vec<usize> = if len <= per_tensor { (0..len).collect() } else { sample(rng, len, per_tensor).into_vec() };
        for k in picks {
            let orig = model.params().get(id).data[k];
            model.params_mut().get_mut(id).data[k] = orig + h;
            let up = loss(model);
            model.params_mut().get_mut(id).data[k] = orig - h;
            let down = loss(model);
            model.params_mut().get_mut(id).data[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads[id.0].as_ref().map_or(0.0, |g| g.data[k]);
            let scale = analytic.abs().max(numeric.abs());
            let err = if scale >= 1e-5 {
                (analytic - numeric).abs() / scale
            } else if (analytic - numeric).abs() <= 1e-8 {
                0.0
            } else {
                (analytic - numeric).abs() / 1e-5
            };
            if err > worst {
                worst = err;
                if err > 1e-3 {
                    eprintln!("{name}[{k}]: analytic {analytic:e} numeric {numeric:e}");
                }
            }
        }
    }
    worst
}
