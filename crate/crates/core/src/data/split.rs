use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::InteractionLog;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

/// Student-level hold-out test set plus k cross-validation folds over the rest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub test_fraction: f64,
    pub test_students: Vec<usize>,
    pub folds: Vec<Fold>,
}

impl SplitPlan {
    /// Check disjointness and coverage by set algebra.
    pub fn check(&self) -> Result<()> {
        let test: BTreeSet<usize> = self.test_students.iter().copied().collect();
        let mut all_val = BTreeSet::new();
        let mut population: Option<BTreeSet<usize>> = None;
        for (i, fold) in self.folds.iter().enumerate() {
            let train: BTreeSet<usize> = fold.train.iter().copied().collect();
            let val: BTreeSet<usize> = fold.validation.iter().copied().collect();
            if !train.is_disjoint(&test) || !val.is_disjoint(&test) {
                return Err(Error::Validation(format!("fold {i} overlaps the test set")));
            }
            if !train.is_disjoint(&val) {
                return Err(Error::Validation(format!("fold {i} train and validation overlap")));
            }
            let union: BTreeSet<usize> = train.union(&val).copied().collect();
            match &population {
                None => population = Some(union),
                Some(p) if *p != union => {
                    return Err(Error::Validation(format!("fold {i} does not cover the non-test population")))
                }
                Some(_) => {}
            }
            if !all_val.is_disjoint(&val) {
                return Err(Error::Validation(format!("fold {i} validation overlaps an earlier fold")));
            }
            all_val.extend(val);
        }
        if let Some(p) = population {
            if p != all_val {
                return Err(Error::Validation("validation sets do not cover the non-test population".into()));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let plan: SplitPlan = serde_json::from_str(&text)?;
        plan.check()?;
        Ok(plan)
    }
}

/// Split students (never interactions) into a test set and `folds` folds.
pub fn split_dataset(logs: &[InteractionLog], test_fraction: f64, folds: usize, seed: u64) -> Result<SplitPlan> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!("test fraction {test_fraction} must lie in (0, 1)")));
    }
    if folds < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {folds}")));
    }
    let mut students: Vec<usize> = logs.iter().map(|l| l.student).collect::<BTreeSet<_>>().into_iter().collect();
    let n = students.len();
    if n < folds + 1 {
        return Err(Error::Validation(format!("{n} students cannot fill a test set and {folds} folds")));
    }
    let n_test = ((n as f64 * test_fraction).round() as usize).max(1);
    if n - n_test < folds {
        return Err(Error::Validation(format!(
            "{} students left after holding out {n_test} for test, fewer than {folds} folds",
            n - n_test
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    students.shuffle(&mut rng);
    let (test, rest) = students.split_at(n_test);
    let mut test_students = test.to_vec();
    test_students.sort_unstable();
    let base = rest.len() / folds;
    let extra = rest.len() % folds;
    let mut chunks = Vec::with_capacity(folds);
    let mut start = 0;
    for k in 0..folds {
        let len = base + usize::from(k < extra);
        chunks.push(&rest[start..start + len]);
        start += len;
    }
    let folds = (0..chunks.len())
        .map(|k| {
            let mut validation = chunks[k].to_vec();
            validation.sort_unstable();
            let mut train: Vec<usize> =
                chunks.iter().enumerate().filter(|(j, _)| *j != k).flat_map(|(_, c)| c.iter().copied()).collect();
            train.sort_unstable();
            Fold { train, validation }
        })
        .collect();
    let plan = SplitPlan { seed, test_fraction, test_students, folds };
    plan.check()?;
    Ok(plan)
}
