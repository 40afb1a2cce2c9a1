//! Scoring trained models: one-by-one and all-in-one traces, question-level
//! aggregation, AUC and accuracy, and a perturbation probe for leakage.

mod metrics;
mod probe;

use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expansion::{ExpandedSequence, InputLabel, WindowPlan};
use crate::models::{Alignment, Model, ModelKind, StepPrediction};
use crate::scalar::Scalar;

pub use metrics::{accuracy, auc};
pub use probe::{leakage_probe, LeakageReport, Verdict, LEAK_TOLERANCE};

pub const TRACE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceLevel {
    KcStep,
    Question,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMethod {
    OneByOne,
    AllInOne,
    AggregatedOneByOne,
}

impl EvalMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalMethod::OneByOne => "one_by_one",
            EvalMethod::AllInOne => "all_in_one",
            EvalMethod::AggregatedOneByOne => "aggregated_one_by_one",
        }
    }
}

impl std::fmt::Display for EvalMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for EvalMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "one_by_one" => Ok(EvalMethod::OneByOne),
            "all_in_one" => Ok(EvalMethod::AllInOne),
            "aggregated_one_by_one" | "aggregated" => Ok(EvalMethod::AggregatedOneByOne),
            _ => Err(Error::Config(format!("unknown evaluation method {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionTrace<T> {
    pub level: TraceLevel,
    pub entries: Vec<StepPrediction<T>>,
}

impl<T: Scalar> PredictionTrace<T> {
    pub fn probabilities(&self) -> Vec<T> {
        self.entries.iter().map(|e| e.probability).collect()
    }

    pub fn targets(&self) -> Vec<bool> {
        self.entries.iter().map(|e| e.target).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Keep only entries matching `keep`.
    pub fn filtered(&self, keep: impl Fn(&StepPrediction<T>) -> bool) -> Self {
        PredictionTrace { level: self.level, entries: self.entries.iter().filter(|e| keep(e)).cloned().collect() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc: f64,
    pub accuracy: f64,
    pub method: EvalMethod,
    pub level: TraceLevel,
    pub population: usize,
}

impl EvalReport {
    pub fn from_trace<T: Scalar>(trace: &PredictionTrace<T>, method: EvalMethod) -> Result<Self> {
        if trace.is_empty() {
            return Err(Error::UndefinedMetric("empty trace".into()));
        }
        let (p, t) = (trace.probabilities(), trace.targets());
        Ok(EvalReport {
            auc: auc(&p, &t)?,
            accuracy: accuracy(&p, &t, 0.5)?,
            method,
            level: trace.level,
            population: trace.len(),
        })
    }
}

fn alignment(window: &ExpandedSequence, t: usize) -> Alignment {
    let s = &window.steps[t];
    Alignment {
        student: window.student,
        occurrence: s.occurrence,
        question: s.question,
        kc: s.kc,
        group_index: s.group_index,
        group_size: s.group_size,
    }
}

/// Score every non-pad step, one forward pass per window.
pub fn eval_one_by_one<T: Scalar>(model: &Model<T>, windows: &[ExpandedSequence]) -> Result<PredictionTrace<T>> {
    let policy = model.kind().label_policy();
    let parts: Vec<Vec<StepPrediction<T>>> = windows
        .par_iter()
        .map(|w| model.predict_steps(&w.relabel(policy)))
        .collect::<Result<_>>()?;
    Ok(PredictionTrace { level: TraceLevel::KcStep, entries: parts.into_iter().flatten().collect() })
}

/// Mean of each occurrence's step probabilities.
pub fn aggregate_by_question<T: Scalar>(trace: &PredictionTrace<T>) -> Result<PredictionTrace<T>> {
    if trace.level != TraceLevel::KcStep {
        return Err(Error::Contract("aggregation needs a kc_step trace".into()));
    }
    let mut out = Vec::new();
    let mut i = 0;
    while i < trace.entries.len() {
        let head = &trace.entries[i];
        let size = head.alignment.group_size;
        let group = trace.entries.get(i..i + size).filter(|g| {
            head.alignment.group_index == 0
                && g.iter().enumerate().all(|(k, e)| {
                    e.alignment.group_index == k
                        && e.alignment.student == head.alignment.student
                        && e.alignment.occurrence == head.alignment.occurrence
                })
        });
        let Some(group) = group else {
            return Err(Error::Validation(format!(
                "incomplete group for student {} occurrence {}",
                head.alignment.student, head.alignment.occurrence
            )));
        };
        let mean = group.iter().map(|e| e.probability).sum::<T>() / T::from_usize(size).expect("group size");
        out.push(StepPrediction { probability: mean, target: head.target, alignment: head.alignment });
        i += size;
    }
    Ok(PredictionTrace { level: TraceLevel::Question, entries: out })
}

/// Input for the branch that scores KC `i` of the occurrence starting at
/// `start`: the history before it, the siblings ahead of `i` with their
/// responses hidden (or dropped, for models that cannot hide them), then the
/// query step itself.
pub fn all_in_one_branch(kind: ModelKind, window: &ExpandedSequence, start: usize, i: usize) -> ExpandedSequence {
    let mut steps = window.steps[..start].to_vec();
    let hide = |s: &crate::expansion::ExpandedStep| {
        let mut s = *s;
        s.input_label = InputLabel::Mask;
        s
    };
    let query = &window.steps[start + i];
    let siblings = &window.steps[start..start + i];
    match kind {
        ModelKind::Dkt | ModelKind::Akt => steps.push(hide(query)),
        ModelKind::DktMl | ModelKind::AktMl | ModelKind::AktQm => {
            steps.extend(siblings.iter().map(hide));
            let mut q = *query;
            if kind == ModelKind::AktQm || !q.is_last_in_group() {
                q.input_label = InputLabel::Mask;
            }
            steps.push(q);
        }
        // sibling responses never enter these models; the inputs are kept
        // only so the sequence layout matches one-by-one
        ModelKind::DktAd | ModelKind::DktFuse => {
            steps.extend(siblings.iter().cloned());
            steps.push(*query);
        }
    }
    ExpandedSequence { student: window.student, question_count: window.question_count, steps }
}

/// Score each KC of each occurrence on its own branch and average the
/// branch outputs per occurrence. Runs `sum(group sizes)` forward passes.
pub fn eval_all_in_one<T: Scalar>(model: &Model<T>, windows: &[ExpandedSequence]) -> Result<PredictionTrace<T>> {
    let kind = model.kind();
    let policy = kind.label_policy();
    let parts: Vec<Vec<StepPrediction<T>>> = windows
        .par_iter()
        .map(|w| {
            let w = w.relabel(policy);
            let mut out = Vec::new();
            for g in w.groups() {
                let mut total = T::zero();
                for i in 0..g.len {
                    let branch = all_in_one_branch(kind, &w, g.start, i);
                    let p = model.predict(&branch)?;
                    total = total + *p.last().expect("branch has a query step");
                }
                out.push(StepPrediction {
                    probability: total / T::from_usize(g.len).expect("group size"),
                    target: w.steps[g.start].target,
                    alignment: alignment(&w, g.start),
                });
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(PredictionTrace { level: TraceLevel::Question, entries: parts.into_iter().flatten().collect() })
}

/// Run `method` over a plan and summarise it.
pub fn evaluate<T: Scalar>(model: &Model<T>, plan: &WindowPlan, method: EvalMethod) -> Result<(PredictionTrace<T>, EvalReport)> {
    let trace = match method {
        EvalMethod::OneByOne => eval_one_by_one(model, &plan.windows)?,
        EvalMethod::AggregatedOneByOne => aggregate_by_question(&eval_one_by_one(model, &plan.windows)?)?,
        EvalMethod::AllInOne => eval_all_in_one(model, &plan.windows)?,
    };
    let report = EvalReport::from_trace(&trace, method)?;
    Ok((trace, report))
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceHeader {
    format: String,
    version: u32,
    level: TraceLevel,
    entries: usize,
}

/// One header line, then one JSON object per entry.
pub fn write_trace_jsonl<T: Scalar + Serialize>(trace: &PredictionTrace<T>, mut out: impl Write) -> Result<()> {
    let header = TraceHeader { format: "ktl-trace".into(), version: TRACE_FORMAT_VERSION, level: trace.level, entries: trace.len() };
    let io = |e| Error::io("<trace>", e);
    writeln!(out, "{}", serde_json::to_string(&header)?).map_err(io)?;
    for e in &trace.entries {
        writeln!(out, "{}", serde_json::to_string(e)?).map_err(io)?;
    }
    Ok(())
}

pub fn read_trace_jsonl<T: Scalar + for<'de> Deserialize<'de>>(input: impl BufRead) -> Result<PredictionTrace<T>> {
    let mut lines = input.lines();
    let io = |e| Error::io("<trace>", e);
    let header: TraceHeader = match lines.next() {
        Some(line) => serde_json::from_str(&line.map_err(io)?)?,
        None => return Err(Error::EmptyInput("trace has no header".into())),
    };
    if header.version != TRACE_FORMAT_VERSION {
        return Err(Error::Validation(format!("unsupported trace version {}", header.version)));
    }
    let mut entries = Vec::with_capacity(header.entries);
    for line in lines {
        let line = line.map_err(io)?;
        if !line.trim().is_empty() {
            entries.push(serde_json::from_str(&line)?);
        }
    }
    if entries.len() != header.entries {
        return Err(Error::Validation(format!("trace header promises {} entries, found {}", header.entries, entries.len())));
    }
    Ok(PredictionTrace { level: header.level, entries })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(p: f64, occ: usize, gi: usize, gs: usize) -> StepPrediction<f64> {
        StepPrediction {
            probability: p,
            target: true,
            alignment: Alignment { student: 0, occurrence: occ, question: 0, kc: gi, group_index: gi, group_size: gs },
        }
    }

    #[test]
    fn aggregation_means() {
        let trace = PredictionTrace {
            level: TraceLevel::KcStep,
            entries: vec![entry(0.6, 0, 0, 2), entry(0.8, 0, 1, 2), entry(0.3, 1, 0, 1), entry(0.1, 2, 0, 3), entry(0.2, 2, 1, 3), entry(0.9, 2, 2, 3)],
        };
        let q = aggregate_by_question(&trace).unwrap();
        let p = q.probabilities();
        assert_eq!(q.level, TraceLevel::Question);
        assert!((p[0] - 0.7).abs() < 1e-15);
        assert_eq!(p[1], 0.3);
        assert!((p[2] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn incomplete_group_is_rejected() {
        let trace = PredictionTrace { level: TraceLevel::KcStep, entries: vec![entry(0.6, 0, 0, 2), entry(0.3, 1, 0, 1)] };
        assert!(aggregate_by_question(&trace).is_err());
        let trace = PredictionTrace { level: TraceLevel::KcStep, entries: vec![entry(0.6, 0, 1, 2)] };
        assert!(aggregate_by_question(&trace).is_err());
    }

    #[test]
    fn trace_round_trip() {
        let trace = PredictionTrace { level: TraceLevel::KcStep, entries: vec![entry(0.6, 0, 0, 2), entry(0.1 + 0.2, 0, 1, 2)] };
        let mut buf = Vec::new();
        write_trace_jsonl(&trace, &mut buf).unwrap();
        assert_eq!(String::from_utf8_lossy(&buf).lines().count(), 3);
        let back: PredictionTrace<f64> = read_trace_jsonl(&buf[..]).unwrap();
        assert_eq!(back, trace);
    }

    #[test]
    fn method_names() {
        for m in [EvalMethod::OneByOne, EvalMethod::AllInOne, EvalMethod::AggregatedOneByOne] {
            assert_eq!(m.as_str().parse::<EvalMethod>().unwrap(), m);
        }
        assert_eq!("one-by-one".parse::<EvalMethod>().unwrap(), EvalMethod::OneByOne);
    }
}
