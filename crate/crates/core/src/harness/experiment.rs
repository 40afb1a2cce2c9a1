use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{build_windows, cross_validate, render_bar_chart_svg, render_table, ComparisonRow, TableFormat, TrainConfig};
use crate::data::{
    compute_stats, corr_transform, generate_synthetic, load_dataset, load_prepared, split_dataset, Dataset, DatasetKind, SyntheticConfig,
};
use crate::error::{Error, Result};
use crate::evaluation::EvalMethod;
use crate::expansion::{fairness_check, FairnessReport};
use crate::models::{Checkpoint, ModelKind};
use crate::scalar::Scalar;

pub const RUNS_DIR: &str = "runs";
pub const CHECKPOINTS_DIR: &str = "checkpoints";
pub const FAIRNESS_FILE: &str = "fairness.json";
pub const COMPARISON_FILE: &str = "comparison.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    /// A directory written by `prepare`.
    Prepared,
    Canonical,
    Assistments2009,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub source: DatasetSource,
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub corr_transform: bool,
    #[serde(default)]
    pub synthetic: Option<SyntheticConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_test_fraction() -> f64 {
    0.2
}

fn default_folds() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSection {
    pub questions: usize,
}

/// Optional training settings; unset fields keep the per-model default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub window_questions: Option<usize>,
    pub validation_method: Option<EvalMethod>,
    pub seed: Option<u64>,
    pub probe_samples: Option<usize>,
    pub d: Option<usize>,
    pub hidden: Option<usize>,
    pub attention_blocks: Option<usize>,
    pub attention_heads: Option<usize>,
    pub dropout: Option<f64>,
    pub model_seed: Option<u64>,
}

impl Overrides {
    fn apply(&self, c: &mut TrainConfig) {
        macro_rules! set {
            ($($src:ident => $($dst:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$src.clone() { c.$($dst).+ = v; })*
            };
        }
        set!(
            learning_rate => learning_rate,
            batch_size => batch_size,
            max_epochs => max_epochs,
            patience => patience,
            window_questions => window_questions,
            validation_method => validation_method,
            seed => seed,
            probe_samples => probe_samples,
            d => model.d,
            hidden => model.hidden,
            attention_blocks => model.attention_blocks,
            attention_heads => model.attention_heads,
            dropout => model.dropout,
            model_seed => model.seed,
        );
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "toml::Table")]
pub struct ModelEntry {
    pub id: ModelKind,
    #[serde(flatten)]
    pub overrides: Overrides,
}

impl TryFrom<toml::Table> for ModelEntry {
    type Error = String;

    // `id` is split off first; any other unknown key is an error
    fn try_from(mut table: toml::Table) -> std::result::Result<Self, String> {
        let id = table.remove("id").ok_or("model entry needs an id")?;
        let id = id.as_str().ok_or("model id must be a string")?.parse().map_err(|e: Error| e.to_string())?;
        let overrides = Overrides::deserialize(toml::Value::Table(table)).map_err(|e| e.to_string())?;
        Ok(ModelEntry { id, overrides })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: Option<String>,
    /// "f64" (default) or "f32".
    #[serde(default)]
    pub scalar: Option<String>,
    pub dataset: DatasetSection,
    #[serde(default = "default_split")]
    pub split: SplitSection,
    pub window: WindowSection,
    #[serde(default)]
    pub defaults: Overrides,
    pub models: Vec<ModelEntry>,
}

fn default_split() -> SplitSection {
    SplitSection { test_fraction: default_test_fraction(), folds: default_folds(), seed: 0 }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Fully materialised training settings per listed model.
    pub fn resolve(&self) -> Result<Vec<TrainConfig>> {
        if self.models.is_empty() {
            return Err(Error::Config("experiment lists no models".into()));
        }
        self.models
            .iter()
            .map(|m| {
                let mut c = TrainConfig::new(m.id);
                c.window_questions = self.window.questions;
                self.defaults.apply(&mut c);
                m.overrides.apply(&mut c);
                c.validate()?;
                Ok(c)
            })
            .collect()
    }

    pub fn load_dataset(&self, base: &Path) -> Result<Dataset> {
        let d = &self.dataset;
        let path = || {
            d.path
                .as_ref()
                .map(|p| base.join(p))
                .ok_or_else(|| Error::Config("dataset.path is required for this source".into()))
        };
        let dataset = match d.source {
            DatasetSource::Prepared => load_prepared(&path()?)?.0,
            DatasetSource::Canonical => load_dataset(path()?, DatasetKind::Canonical)?.0,
            DatasetSource::Assistments2009 => load_dataset(path()?, DatasetKind::Assistments2009)?.0,
            DatasetSource::Synthetic => {
                let cfg = d.synthetic.as_ref().ok_or_else(|| Error::Config("dataset.synthetic is required".into()))?;
                generate_synthetic(cfg)?
            }
        };
        if d.corr_transform {
            corr_transform(&dataset)
        } else {
            Ok(dataset)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessAttestation {
    pub window_questions: Vec<(ModelKind, usize)>,
    pub report: FairnessReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub name: Option<String>,
    pub rows: Vec<ComparisonRow>,
    pub fairness: FairnessAttestation,
    pub records: usize,
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Check that every model is scored on the same targets before any training.
fn attest(dataset: &Dataset, test_students: &[usize], configs: &[TrainConfig]) -> Result<FairnessAttestation> {
    let logs = dataset.logs_for(test_students);
    let plans = configs
        .iter()
        .map(|c| Ok((c.kind().to_string(), build_windows(&logs, dataset, c.kind(), c.window_questions)?)))
        .collect::<Result<Vec<_>>>()?;
    let named: Vec<(String, &_)> = plans.iter().map(|(n, p)| (n.clone(), p)).collect();
    Ok(FairnessAttestation {
        window_questions: configs.iter().map(|c| (c.kind(), c.window_questions)).collect(),
        report: fairness_check(&named),
    })
}

/// Load, split, attest fairness, cross-validate every model, and write the
/// records, checkpoints and comparison table under `out`.
pub fn run_experiment<T: Scalar>(cfg: &ExperimentConfig, base: &Path, out: &Path) -> Result<ExperimentSummary> {
    let configs = cfg.resolve()?;
    let dataset = cfg.load_dataset(base)?;
    dataset.validate()?;
    write(&out.join("stats.json"), &(serde_json::to_string_pretty(&compute_stats(&dataset.logs, &dataset.mapping)?.to_json())? + "\n"))?;
    let plan = split_dataset(&dataset.logs, cfg.split.test_fraction, cfg.split.folds, cfg.split.seed)?;
    plan.save(&out.join("split.json"))?;
    write(&out.join("experiment.resolved.json"), &(serde_json::to_string_pretty(&configs)? + "\n"))?;

    let fairness = attest(&dataset, &plan.test_students, &configs)?;
    write(&out.join(FAIRNESS_FILE), &(serde_json::to_string_pretty(&fairness)? + "\n"))?;
    let mut ws: Vec<usize> = configs.iter().map(|c| c.window_questions).collect();
    ws.dedup();
    if ws.len() > 1 {
        return Err(Error::Fairness(format!(
            "models use different window sizes ({}); see {}",
            fairness.window_questions.iter().map(|(k, w)| format!("{k}={w}")).collect::<Vec<_>>().join(", "),
            out.join(FAIRNESS_FILE).display()
        )));
    }
    if !fairness.report.fair {
        return Err(Error::Fairness(format!(
            "{} evaluation targets differ between models; see {}",
            fairness.report.divergences.len(),
            out.join(FAIRNESS_FILE).display()
        )));
    }

    let mut records = Vec::new();
    for c in &configs {
        let dir = out.join(RUNS_DIR).join(c.kind().as_str());
        let outcomes = match cross_validate::<T>(&dataset, &plan, c) {
            Ok(o) => o,
            Err(e @ Error::Divergence { .. }) => {
                write(&dir.join("diverged.txt"), &format!("{e}\n{}\n", diagnostic(&e)))?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        for o in outcomes {
            let k = o.record.fold;
            write(&dir.join(format!("fold{k}.json")), &(serde_json::to_string_pretty(&o.record)? + "\n"))?;
            let ckpt = out.join(CHECKPOINTS_DIR).join(c.kind().as_str()).join(format!("fold{k}.json"));
            std::fs::create_dir_all(ckpt.parent().expect("checkpoint dir")).map_err(|e| Error::io(&ckpt, e))?;
            Checkpoint::from_model(&o.model, c.window_questions, dataset.ids.clone()).save(&ckpt)?;
            records.push(o.record);
        }
    }
    let rows = super::comparison_rows(&records);
    write(&out.join(COMPARISON_FILE), &render_table(&rows, TableFormat::Csv)?)?;
    write(&out.join("comparison.md"), &render_table(&rows, TableFormat::Markdown)?)?;
    write(&out.join("comparison.json"), &render_table(&rows, TableFormat::Json)?)?;
    write(&out.join("test_auc.svg"), &render_bar_chart_svg(&rows))?;
    let summary = ExperimentSummary { name: cfg.name.clone(), rows, fairness, records: records.len() };
    write(&out.join("summary.json"), &(serde_json::to_string_pretty(&summary)? + "\n"))?;
    Ok(summary)
}

fn diagnostic(e: &Error) -> &str {
    match e {
        Error::Divergence { diagnostic, .. } => diagnostic,
        _ => "",
    }
}

/// Parse a TOML experiment file and run it at the configured precision.
/// Relative dataset paths resolve against the file's directory.
pub fn run_experiment_file(path: &Path, out: &Path) -> Result<ExperimentSummary> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg = ExperimentConfig::parse(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    match cfg.scalar.as_deref().unwrap_or("f64") {
        "f64" => run_experiment::<f64>(&cfg, base, out),
        "f32" => run_experiment::<f32>(&cfg, base, out),
        other => Err(Error::Config(format!("unknown scalar {other:?}; use f32 or f64"))),
    }
}
