//! Training with Adam and early stopping, k-fold cross-validation against a
//! shared hold-out test set, and declarative experiments.

mod experiment;
mod report;

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{accumulate_grads, Grads};
use crate::data::{Dataset, InteractionLog, SplitPlan};
use crate::error::{Error, Result};
use crate::evaluation::{
    aggregate_by_question, eval_all_in_one, eval_one_by_one, leakage_probe, EvalMethod, EvalReport, LeakageReport,
};
use crate::expansion::{expand, window_with_capacity, LabelPolicy, PlanLevel, WindowPlan};
use crate::models::{Model, ModelConfig, ModelKind};
use crate::optim::Adam;
use crate::scalar::Scalar;

pub use experiment::{
    run_experiment, run_experiment_file, DatasetSection, ExperimentConfig, ExperimentSummary, ModelEntry, SplitSection,
    COMPARISON_FILE, FAIRNESS_FILE, RUNS_DIR,
};
pub use report::{comparison_rows, load_run_records, render_bar_chart_svg, render_table, ComparisonRow, TableFormat};

pub const RECORD_FORMAT_VERSION: u32 = 1;

/// How windows are cut from long sequences: consecutive, non-overlapping
/// chunks of at most W occurrences, nothing dropped.
pub const WINDOW_RULE: &str = "split";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub window_questions: usize,
    pub validation_method: EvalMethod,
    pub seed: u64,
    /// Occurrences sampled by the leakage probe on the test set; 0 skips it.
    pub probe_samples: usize,
}

impl TrainConfig {
    pub fn new(kind: ModelKind) -> Self {
        TrainConfig {
            model: ModelConfig::new(kind),
            learning_rate: 1e-3,
            batch_size: kind.default_batch_size(),
            max_epochs: 100,
            patience: 5,
            window_questions: 100,
            validation_method: default_validation(kind),
            seed: 0,
            probe_samples: 50,
        }
    }

    pub fn kind(&self) -> ModelKind {
        self.model.kind
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 || self.window_questions == 0 {
            return Err(Error::Config("batch size, epochs, patience and window must be positive".into()));
        }
        if self.patience > self.max_epochs {
            return Err(Error::Config(format!("patience {} exceeds max epochs {}", self.patience, self.max_epochs)));
        }
        if self.validation_method == EvalMethod::AllInOne {
            return Err(Error::Config("validation uses one_by_one or aggregated_one_by_one".into()));
        }
        Ok(())
    }
}

/// One-by-one for the two baselines, as they are usually selected; the
/// aggregated flavour for every leak-free model.
pub fn default_validation(kind: ModelKind) -> EvalMethod {
    if kind.is_leak_free() {
        EvalMethod::AggregatedOneByOne
    } else {
        EvalMethod::OneByOne
    }
}

/// Test protocol: baselines are scored all-in-one, leak-free models with the
/// same aggregated flavour used for validation.
pub fn test_method(kind: ModelKind) -> EvalMethod {
    if kind.is_leak_free() {
        EvalMethod::AggregatedOneByOne
    } else {
        EvalMethod::AllInOne
    }
}

/// Stop once `patience` epochs pass without a strictly better metric.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping { patience, best: None, stale: 0 }
    }

    /// Record `metric` for `epoch`; true means stop now.
    pub fn observe(&mut self, epoch: usize, metric: f64) -> bool {
        match self.best {
            Some((_, b)) if metric <= b => self.stale += 1,
            _ => {
                self.best = Some((epoch, metric));
                self.stale = 0;
            }
        }
        self.stale >= self.patience
    }

    pub fn is_best(&self, epoch: usize) -> bool {
        self.best.is_some_and(|(e, _)| e == epoch)
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

/// Windows for a set of students, under the model's input layout.
pub fn build_windows(logs: &[InteractionLog], dataset: &Dataset, kind: ModelKind, window_questions: usize) -> Result<WindowPlan> {
    let seqs = logs
        .iter()
        .map(|l| expand(l, &dataset.mapping, LabelPolicy::GroundTruth))
        .collect::<Result<Vec<_>>>()?;
    let level = if kind.expands() { PlanLevel::KcStep } else { PlanLevel::Question };
    Ok(window_with_capacity(&seqs, window_questions, dataset.mapping.max_group_size(), level))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_one_by_one_auc: f64,
    pub validation_aggregated_auc: f64,
    /// The configured flavour, copied from one of the two above.
    pub validation_metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub selected_epoch: usize,
    pub stopped_early: bool,
}

fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b);
    rng.random()
}

fn validation_aucs<T: Scalar>(model: &Model<T>, plan: &WindowPlan) -> Result<(f64, f64)> {
    let steps = eval_one_by_one(model, &plan.windows)?;
    let agg = aggregate_by_question(&steps)?;
    Ok((
        EvalReport::from_trace(&steps, EvalMethod::OneByOne)?.auc,
        EvalReport::from_trace(&agg, EvalMethod::AggregatedOneByOne)?.auc,
    ))
}

/// Train in place and restore the parameters of the best validation epoch.
pub fn train<T: Scalar>(model: &mut Model<T>, train_plan: &WindowPlan, validation_plan: &WindowPlan, cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    if train_plan.windows.is_empty() {
        return Err(Error::EmptyInput("no training windows".into()));
    }
    let policy = cfg.kind().label_policy();
    let windows: Vec<_> = train_plan.windows.iter().map(|w| w.relabel(policy)).collect();
    let mut by_student: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, w) in windows.iter().enumerate() {
        by_student.entry(w.student).or_default().push(i);
    }
    let students: Vec<usize> = by_student.keys().copied().collect();
    let mut adam = Adam::new(cfg.learning_rate);
    let mut stopping = EarlyStopping::new(cfg.patience);
    let mut best_params = model.params().clone();
    let mut epochs = Vec::new();
    let mut stopped_early = false;
    for epoch in 1..=cfg.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 1, epoch as u64));
        let mut order = students.clone();
        order.shuffle(&mut rng);
        // same-student windows stay together
        let batch_order: Vec<usize> = order.iter().flat_map(|s| by_student[s].iter().copied()).collect();
        let (mut loss_sum, mut loss_terms) = (0.0, 0usize);
        for batch in batch_order.chunks(cfg.batch_size) {
            let seeds: Vec<u64> = batch.iter().map(|_| rng.random()).collect();
            let model_ref = &*model;
            let results: Vec<(T, usize, Grads<T>)> = batch
                .par_iter()
                .zip(&seeds)
                .filter(|(&i, _)| windows[i].valid_len() > 0)
                .map(|(&i, &s)| {
                    let mut drop_rng = ChaCha8Rng::seed_from_u64(s);
                    model_ref.loss_and_grads(&windows[i], Some(&mut drop_rng))
                })
                .collect::<Result<_>>()?;
            let terms: usize = results.iter().map(|r| r.1).sum();
            if terms == 0 {
                continue;
            }
            let weight = T::one() / T::from_usize(terms).expect("term count");
            let mut grads: Grads<T> = Vec::new();
            for (loss, count, g) in results {
                loss_sum += loss.to_f64_lossy();
                loss_terms += count;
                accumulate_grads(&mut grads, g, weight);
            }
            if !loss_sum.is_finite() {
                return Err(divergence(epoch, loss_sum, &epochs));
            }
            adam.step(model.params_mut(), &grads);
        }
        let train_loss = loss_sum / loss_terms.max(1) as f64;
        let params_finite = model.params().iter().all(|(_, _, t)| t.data.iter().all(|x| x.is_finite()));
        if !train_loss.is_finite() || !params_finite {
            let loss = if params_finite { train_loss } else { f64::NAN };
            return Err(divergence(epoch, loss, &epochs));
        }
        let (obo, agg) = validation_aucs(model, validation_plan)?;
        let metric = if cfg.validation_method == EvalMethod::OneByOne { obo } else { agg };
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            validation_one_by_one_auc: obo,
            validation_aggregated_auc: agg,
            validation_metric: metric,
        });
        let stop = stopping.observe(epoch, metric);
        if stopping.is_best(epoch) {
            best_params = model.params().clone();
        }
        if stop {
            stopped_early = epoch < cfg.max_epochs;
            break;
        }
    }
    *model.params_mut() = best_params;
    let selected_epoch = stopping.best().map_or(0, |(e, _)| e);
    Ok(TrainLog { epochs, selected_epoch, stopped_early })
}

fn divergence(epoch: usize, loss: f64, history: &[EpochRecord]) -> Error {
    Error::Divergence {
        epoch,
        loss,
        diagnostic: serde_json::to_string(history).unwrap_or_default(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub package_version: String,
    pub os: String,
    pub arch: String,
    pub scalar: String,
    pub threads: usize,
}

impl Environment {
    pub fn capture<T: Scalar>() -> Self {
        Environment {
            package_version: env!("CARGO_PKG_VERSION").to_string(),
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
            scalar: T::NAME.to_string(),
            threads: rayon::current_num_threads(),
        }
    }
}

/// Everything one fold produced, self-contained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub format_version: u32,
    pub model: ModelKind,
    pub fold: usize,
    pub config: TrainConfig,
    pub window_rule: String,
    pub dataset_digest: String,
    pub split_seed: u64,
    pub test_fraction: f64,
    pub train_students: Vec<usize>,
    pub validation_students: Vec<usize>,
    pub test_students: Vec<usize>,
    pub epochs: Vec<EpochRecord>,
    pub selected_epoch: usize,
    pub stopped_early: bool,
    pub validation_method: EvalMethod,
    pub test: EvalReport,
    /// Aggregated one-by-one on the test set, kept next to the primary
    /// report so the two protocols can be compared.
    pub test_aggregated: EvalReport,
    pub leakage: Option<LeakageReport>,
    pub wall_clock_seconds: f64,
    pub environment: Environment,
}

impl RunRecord {
    /// Copy with timing zeroed, for determinism comparisons.
    pub fn without_timing(&self) -> Self {
        RunRecord { wall_clock_seconds: 0.0, ..self.clone() }
    }
}

/// SHA-256 over the dataset's canonical JSON form.
pub fn dataset_digest(dataset: &Dataset) -> Result<String> {
    let bytes = serde_json::to_vec(dataset)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

pub struct FoldOutcome<T> {
    pub record: RunRecord,
    pub model: Model<T>,
}

/// Train one model per fold and score each on the shared test set.
pub fn cross_validate<T: Scalar>(dataset: &Dataset, plan: &SplitPlan, cfg: &TrainConfig) -> Result<Vec<FoldOutcome<T>>> {
    cfg.validate()?;
    plan.check()?;
    dataset.validate()?;
    let kind = cfg.kind();
    let digest = dataset_digest(dataset)?;
    let test_logs = dataset.logs_for(&plan.test_students);
    let test_plan = build_windows(&test_logs, dataset, kind, cfg.window_questions)?;
    let test_set: BTreeSet<usize> = plan.test_students.iter().copied().collect();
    plan.folds
        .par_iter()
        .enumerate()
        .map(|(k, fold)| {
            let start = Instant::now();
            let train_plan = build_windows(&dataset.logs_for(&fold.train), dataset, kind, cfg.window_questions)?;
            if train_plan.windows.iter().any(|w| test_set.contains(&w.student)) {
                return Err(Error::Contract(format!("fold {k} would train on a test student")));
            }
            let validation_plan = build_windows(&dataset.logs_for(&fold.validation), dataset, kind, cfg.window_questions)?;
            let mut fold_cfg = cfg.clone();
            fold_cfg.model.seed = mix_seed(cfg.model.seed, 2, k as u64);
            fold_cfg.seed = mix_seed(cfg.seed, 3, k as u64);
            let mut model = Model::new(fold_cfg.model.clone(), dataset.mapping.num_questions(), dataset.mapping.num_kcs())?;
            let log = train(&mut model, &train_plan, &validation_plan, &fold_cfg)?;
            let aggregated = aggregate_by_question(&eval_one_by_one(&model, &test_plan.windows)?)?;
            let test_aggregated = EvalReport::from_trace(&aggregated, EvalMethod::AggregatedOneByOne)?;
            let test = match test_method(kind) {
                EvalMethod::AllInOne => EvalReport::from_trace(&eval_all_in_one(&model, &test_plan.windows)?, EvalMethod::AllInOne)?,
                _ => test_aggregated.clone(),
            };
            let leakage = match cfg.probe_samples {
                0 => None,
                n => match leakage_probe(&model, &test_plan.windows, n, cfg.seed) {
                    Ok(r) => Some(r),
                    Err(Error::Inconclusive(_)) => None,
                    Err(e) => return Err(e),
                },
            };
            let record = RunRecord {
                format_version: RECORD_FORMAT_VERSION,
                model: kind,
                fold: k,
                config: fold_cfg.clone(),
                window_rule: WINDOW_RULE.to_string(),
                dataset_digest: digest.clone(),
                split_seed: plan.seed,
                test_fraction: plan.test_fraction,
                train_students: fold.train.clone(),
                validation_students: fold.validation.clone(),
                test_students: plan.test_students.clone(),
                epochs: log.epochs,
                selected_epoch: log.selected_epoch,
                stopped_early: log.stopped_early,
                validation_method: fold_cfg.validation_method,
                test,
                test_aggregated,
                leakage,
                wall_clock_seconds: start.elapsed().as_secs_f64(),
                environment: Environment::capture::<T>(),
            };
            Ok(FoldOutcome { record, model })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn early_stopping_arithmetic() {
        let mut s = EarlyStopping::new(2);
        assert!(!s.observe(1, 0.7));
        assert!(!s.observe(2, 0.6));
        assert!(s.observe(3, 0.7));
        assert_eq!(s.best(), Some((1, 0.7)));
        let mut s = EarlyStopping::new(1);
        assert!(!s.observe(1, 0.5));
        assert!(!s.observe(2, 0.6));
        assert!(s.is_best(2));
    }

    #[test]
    fn config_defaults_and_checks() {
        let c = TrainConfig::new(ModelKind::Akt);
        assert_eq!((c.learning_rate, c.batch_size, c.max_epochs, c.patience), (1e-3, 24, 100, 5));
        assert_eq!(c.validation_method, EvalMethod::OneByOne);
        assert_eq!(TrainConfig::new(ModelKind::DktMl).validation_method, EvalMethod::AggregatedOneByOne);
        let mut bad = c.clone();
        bad.patience = 200;
        assert!(bad.validate().is_err());
        bad = c;
        bad.validation_method = EvalMethod::AllInOne;
        assert!(bad.validate().is_err());
    }
}
