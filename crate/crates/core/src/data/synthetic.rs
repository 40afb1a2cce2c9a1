use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{assemble, corr_transform, Dataset, IngestReport, RawRow};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationMode {
    Independent,
    /// Every KC is duplicated into two perfectly correlated copies.
    Duplicated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub num_students: usize,
    pub num_questions: usize,
    /// Size of the base KC universe, before any duplication.
    pub num_kcs: usize,
    /// Base KCs per question, before any duplication.
    pub kcs_per_question: usize,
    pub interactions_per_student: usize,
    pub seed: u64,
    pub mode: CorrelationMode,
}

impl SyntheticConfig {
    pub fn new(num_students: usize, num_questions: usize, num_kcs: usize, kcs_per_question: usize, seed: u64, mode: CorrelationMode) -> Self {
        SyntheticConfig {
            num_students,
            num_questions,
            num_kcs,
            kcs_per_question,
            interactions_per_student: 30,
            seed,
            mode,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Simulated students answering questions under a latent proficiency model.
///
/// Each student has a global ability plus a per-KC offset; each question has a
/// difficulty. Practising a KC raises its proficiency a little. The chance of a
/// correct answer is the logistic of mean KC proficiency minus difficulty, so
/// past responses carry real signal about future ones.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    if cfg.kcs_per_question == 0 || cfg.kcs_per_question > cfg.num_kcs {
        return Err(Error::Config(format!(
            "kcs_per_question {} must lie in 1..={}",
            cfg.kcs_per_question, cfg.num_kcs
        )));
    }
    if cfg.num_students == 0 || cfg.num_questions == 0 || cfg.interactions_per_student == 0 {
        return Err(Error::Config("synthetic counts must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let width_q = digits(cfg.num_questions);
    let width_k = digits(cfg.num_kcs);
    let width_s = digits(cfg.num_students);

    let questions: Vec<(Vec<usize>, f64)> = (0..cfg.num_questions)
        .map(|_| {
            let mut kcs = sample(&mut rng, cfg.num_kcs, cfg.kcs_per_question).into_vec();
            kcs.sort_unstable();
            (kcs, 0.8 * unit.sample(&mut rng))
        })
        .collect();

    let mut rows = Vec::with_capacity(cfg.num_students * cfg.interactions_per_student);
    for s in 0..cfg.num_students {
        let ability = unit.sample(&mut rng);
        let mut proficiency: Vec<f64> = (0..cfg.num_kcs).map(|_| ability + 0.8 * unit.sample(&mut rng)).collect();
        for t in 0..cfg.interactions_per_student {
            let q = rng.random_range(0..cfg.num_questions);
            let (kcs, difficulty) = &questions[q];
            let skill = kcs.iter().map(|&c| proficiency[c]).sum::<f64>() / kcs.len() as f64;
            let response = rng.random::<f64>() < sigmoid(1.5 * (skill - difficulty));
            for &c in kcs {
                proficiency[c] += if response { 0.15 } else { 0.05 };
            }
            rows.push(RawRow {
                line: rows.len() + 2,
                student: format!("s{s:0width_s$}"),
                order: t as u64,
                question: format!("q{q:0width_q$}"),
                kcs: kcs.iter().map(|c| format!("k{c:0width_k$}")).collect(),
                response,
            });
        }
    }
    let (dataset, _) = assemble(rows, IngestReport::default())?;
    match cfg.mode {
        CorrelationMode::Independent => Ok(dataset),
        CorrelationMode::Duplicated => corr_transform(&dataset),
    }
}

fn digits(n: usize) -> usize {
    n.saturating_sub(1).max(1).to_string().len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::compute_stats;

    #[test]
    fn independent_mode_average() {
        let ds = generate_synthetic(&SyntheticConfig::new(10, 20, 5, 2, 7, CorrelationMode::Independent)).unwrap();
        let stats = compute_stats(&ds.logs, &ds.mapping).unwrap();
        assert_eq!(stats.avg_kcs_per_question(), 2.0);
        assert_eq!(stats.num_students, 10);
    }

    #[test]
    fn duplicated_mode_pairs_up() {
        let ds = generate_synthetic(&SyntheticConfig::new(10, 20, 5, 2, 7, CorrelationMode::Duplicated)).unwrap();
        let n = ds.mapping.num_kcs() / 2;
        for set in ds.mapping.entries() {
            assert_eq!(set.len() % 2, 0);
            let (first, second) = set.split_at(set.len() / 2);
            assert!(first.iter().zip(second).all(|(&a, &b)| b == a + n));
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let cfg = SyntheticConfig::new(8, 12, 4, 1, 3, CorrelationMode::Independent);
        let a = serde_json::to_string(&generate_synthetic(&cfg).unwrap()).unwrap();
        let b = serde_json::to_string(&generate_synthetic(&cfg).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_oversized_kc_sets() {
        assert!(generate_synthetic(&SyntheticConfig::new(2, 2, 2, 3, 0, CorrelationMode::Independent)).is_err());
    }
}
