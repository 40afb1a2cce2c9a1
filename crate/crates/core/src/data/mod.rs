//! Interaction logs, the question to KC mapping, and everything needed to get
//! raw exports into that shape: loaders, dataset statistics, the
//! duplicated-KC transform, student-level splits and a synthetic generator.

mod assistments;
mod canonical;
mod split;
mod stats;
mod synthetic;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use canonical::{load_prepared, read_id_map, write_id_map, write_prepared};
pub use split::{split_dataset, Fold, SplitPlan};
pub use stats::{compute_stats, corr_transform, DatasetStats};
pub use synthetic::{generate_synthetic, CorrelationMode, SyntheticConfig};

/// One answered question. The KC set lives in [`KcMapping`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub order: u64,
    pub question: usize,
    pub response: bool,
}

/// A single student's chronological interaction record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionLog {
    pub student: usize,
    pub interactions: Vec<Interaction>,
}

impl InteractionLog {
    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }
}

/// Question to KC-set map over dense ids. Every KC set is sorted ascending
/// and duplicate free.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KcMapping {
    entries: Vec<Vec<usize>>,
    num_kcs: usize,
}

impl KcMapping {
    pub fn new(entries: Vec<Vec<usize>>, num_kcs: usize) -> Result<Self> {
        let mut entries = entries;
        for (q, kcs) in entries.iter_mut().enumerate() {
            if kcs.is_empty() {
                return Err(Error::Validation(format!("question {q} has no KCs")));
            }
            kcs.sort_unstable();
            if kcs.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::Validation(format!("question {q} lists a KC twice")));
            }
            if let Some(&c) = kcs.last() {
                if c >= num_kcs {
                    return Err(Error::Validation(format!(
                        "question {q} references KC {c} outside a universe of {num_kcs}"
                    )));
                }
            }
        }
        Ok(KcMapping { entries, num_kcs })
    }

    pub fn kcs(&self, question: usize) -> Option<&[usize]> {
        self.entries.get(question).map(Vec::as_slice)
    }

    pub fn num_questions(&self) -> usize {
        self.entries.len()
    }

    /// Size of the KC universe.
    pub fn num_kcs(&self) -> usize {
        self.num_kcs
    }

    pub fn entries(&self) -> &[Vec<usize>] {
        &self.entries
    }

    /// Largest KC set size over all questions.
    pub fn max_group_size(&self) -> usize {
        self.entries.iter().map(Vec::len).max().unwrap_or(1)
    }
}

/// Dense id to raw id table. Dense ids are assigned in ascending raw-id order.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct IdMap {
    raw: Vec<String>,
}

impl IdMap {
    pub fn from_raw_sorted(raw: impl IntoIterator<Item = String>) -> Self {
        let mut raw: Vec<String> = raw.into_iter().collect();
        raw.sort();
        raw.dedup();
        IdMap { raw }
    }

    pub fn from_dense_order(raw: Vec<String>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for r in &raw {
            if !seen.insert(r.as_str()) {
                return Err(Error::Validation(format!("id map lists raw id {r:?} twice")));
            }
        }
        Ok(IdMap { raw })
    }

    pub fn raw(&self, dense: usize) -> Option<&str> {
        self.raw.get(dense).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn raw_ids(&self) -> &[String] {
        &self.raw
    }

    pub fn lookup(&self) -> HashMap<&str, usize> {
        self.raw.iter().enumerate().map(|(i, r)| (r.as_str(), i)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct IdMaps {
    pub students: IdMap,
    pub questions: IdMap,
    pub kcs: IdMap,
}

/// Counts surfaced by the loaders so cleaning choices can be audited.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct IngestReport {
    pub rows_read: usize,
    pub rows_dropped_missing_kc: usize,
    pub rows_merged_multi_kc: usize,
    pub response_conflicts: usize,
    pub interactions: usize,
}

/// Logs, mapping and id tables for one dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub logs: Vec<InteractionLog>,
    pub mapping: KcMapping,
    pub ids: IdMaps,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        if self.logs.is_empty() {
            return Err(Error::EmptyInput("dataset has no students".into()));
        }
        for log in &self.logs {
            for pair in log.interactions.windows(2) {
                if pair[0].order >= pair[1].order {
                    return Err(Error::Validation(format!(
                        "student {} has non-increasing order {} -> {}",
                        log.student, pair[0].order, pair[1].order
                    )));
                }
            }
            for it in &log.interactions {
                if self.mapping.kcs(it.question).is_none() {
                    return Err(Error::Validation(format!(
                        "question {} has no mapping entry",
                        it.question
                    )));
                }
            }
        }
        Ok(())
    }

    /// Subset of logs for the given students, in ascending student order.
    pub fn logs_for(&self, students: &[usize]) -> Vec<InteractionLog> {
        let wanted: std::collections::BTreeSet<usize> = students.iter().copied().collect();
        self.logs.iter().filter(|l| wanted.contains(&l.student)).cloned().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Assistments2009,
    Canonical,
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "assistments2009" | "assistments_2009" | "as09" => Ok(DatasetKind::Assistments2009),
            "canonical" => Ok(DatasetKind::Canonical),
            other => Err(Error::Config(format!("unknown dataset kind {other:?}"))),
        }
    }
}

/// Load a raw export into the canonical in-memory schema.
pub fn load_dataset(path: impl AsRef<std::path::Path>, kind: DatasetKind) -> Result<(Dataset, IngestReport)> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    match kind {
        DatasetKind::Canonical => canonical::parse_canonical(file),
        DatasetKind::Assistments2009 => assistments::parse_assistments(file),
    }
}

/// Raw row after field extraction, before dense re-indexing.
pub(crate) struct RawRow {
    pub line: usize,
    pub student: String,
    pub order: u64,
    pub question: String,
    pub kcs: Vec<String>,
    pub response: bool,
}

/// Re-index raw rows into a dataset. Rows sharing (student, order) must
/// already be merged by the caller.
pub(crate) fn assemble(rows: Vec<RawRow>, report: IngestReport) -> Result<(Dataset, IngestReport)> {
    use std::collections::{BTreeMap, BTreeSet};

    if rows.is_empty() {
        return Err(Error::EmptyInput("no usable interaction rows".into()));
    }
    let students = IdMap::from_raw_sorted(rows.iter().map(|r| r.student.clone()));
    let questions = IdMap::from_raw_sorted(rows.iter().map(|r| r.question.clone()));
    let kcs = IdMap::from_raw_sorted(rows.iter().flat_map(|r| r.kcs.iter().cloned()));
    let (s_lut, q_lut, k_lut) = (students.lookup(), questions.lookup(), kcs.lookup());

    let mut q_kcs: Vec<Option<(usize, BTreeSet<usize>)>> = vec![None; questions.len()];
    let mut per_student: BTreeMap<usize, BTreeMap<u64, (usize, Interaction)>> = BTreeMap::new();
    for row in &rows {
        let q = q_lut[row.question.as_str()];
        let set: BTreeSet<usize> = row.kcs.iter().map(|k| k_lut[k.as_str()]).collect();
        match &q_kcs[q] {
            None => q_kcs[q] = Some((row.line, set)),
            Some((first_line, existing)) if *existing != set => {
                return Err(Error::Ingest {
                    row: row.line,
                    message: format!(
                        "question {:?} has KC set differing from row {first_line}",
                        row.question
                    ),
                })
            }
            Some(_) => {}
        }
        let s = s_lut[row.student.as_str()];
        let slot = per_student.entry(s).or_default();
        if let Some((first_line, _)) = slot.get(&row.order) {
            return Err(Error::Ingest {
                row: row.line,
                message: format!(
                    "duplicate (student {:?}, order {}) first seen at row {first_line}",
                    row.student, row.order
                ),
            });
        }
        slot.insert(row.order, (row.line, Interaction { order: row.order, question: q, response: row.response }));
    }

    let entries = q_kcs
        .into_iter()
        .map(|e| e.map(|(_, s)| s.into_iter().collect()).unwrap_or_default())
        .collect();
    let mapping = KcMapping::new(entries, kcs.len())?;
    let logs = per_student
        .into_iter()
        .map(|(student, by_order)| InteractionLog {
            student,
            interactions: by_order.into_values().map(|(_, it)| it).collect(),
        })
        .collect::<Vec<_>>();
    let mut report = report;
    report.interactions = logs.iter().map(InteractionLog::len).sum();
    let dataset = Dataset { logs, mapping, ids: IdMaps { students, questions, kcs } };
    dataset.validate()?;
    Ok((dataset, report))
}

pub(crate) fn parse_response(field: &str, line: usize) -> Result<bool> {
    match field.trim() {
        "1" | "1.0" => Ok(true),
        "0" | "0.0" => Ok(false),
        other => Err(Error::Ingest { row: line, message: format!("response {other:?} is not 0 or 1") }),
    }
}
