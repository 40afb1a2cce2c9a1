use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{Dataset, IdMap, IdMaps, InteractionLog, KcMapping};
use crate::error::{Error, Result};

/// Dataset attributes in the layout of the usual KT dataset table.
///
/// The KCs-per-question average is kept as an exact ratio
/// `kc_slots / num_questions`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub num_questions: usize,
    pub num_kcs: usize,
    pub num_students: usize,
    pub num_kc_groups: usize,
    /// Sum of |m(q)| over distinct questions.
    pub kc_slots: usize,
}

impl DatasetStats {
    pub fn avg_kcs_per_question(&self) -> f64 {
        self.kc_slots as f64 / self.num_questions as f64
    }

    /// Average rounded to three decimals, as reported in tables.
    pub fn avg_kcs_per_question_rounded(&self) -> f64 {
        (self.avg_kcs_per_question() * 1000.0).round() / 1000.0
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "num_questions": self.num_questions,
            "num_kcs": self.num_kcs,
            "num_students": self.num_students,
            "num_kc_groups": self.num_kc_groups,
            "avg_kcs_per_question": self.avg_kcs_per_question_rounded(),
        })
    }
}

/// Counts over the questions that actually occur in `logs`.
pub fn compute_stats(logs: &[InteractionLog], mapping: &KcMapping) -> Result<DatasetStats> {
    let questions: BTreeSet<usize> = logs.iter().flat_map(|l| l.interactions.iter().map(|i| i.question)).collect();
    if questions.is_empty() {
        return Err(Error::EmptyInput("no interactions to summarize".into()));
    }
    let mut kcs = BTreeSet::new();
    let mut groups = BTreeSet::new();
    let mut kc_slots = 0;
    for &q in &questions {
        let set = mapping
            .kcs(q)
            .ok_or_else(|| Error::Validation(format!("question {q} has no mapping entry")))?;
        kcs.extend(set.iter().copied());
        groups.insert(set.to_vec());
        kc_slots += set.len();
    }
    Ok(DatasetStats {
        num_questions: questions.len(),
        num_kcs: kcs.len(),
        num_students: logs.iter().filter(|l| !l.is_empty()).count(),
        num_kc_groups: groups.len(),
        kc_slots,
    })
}

/// Replace every KC `c` with two perfectly correlated copies `c` and `c + |C|`.
///
/// Raw KC ids become `m1:<raw>` and `m2:<raw>`, which keeps ascending raw order
/// aligned with dense order. Responses are untouched.
pub fn corr_transform(dataset: &Dataset) -> Result<Dataset> {
    let n = dataset.mapping.num_kcs();
    let entries = dataset
        .mapping
        .entries()
        .iter()
        .map(|set| set.iter().copied().chain(set.iter().map(|&c| c + n)).collect())
        .collect();
    let mapping = KcMapping::new(entries, 2 * n)?;
    let raw = |prefix: &'static str| {
        (0..n).map(move |c| format!("{prefix}:{}", dataset.ids.kcs.raw(c).map(str::to_string).unwrap_or_else(|| c.to_string())))
    };
    let kcs = IdMap::from_dense_order(raw("m1").chain(raw("m2")).collect())?;
    Ok(Dataset {
        logs: dataset.logs.clone(),
        mapping,
        ids: IdMaps { students: dataset.ids.students.clone(), questions: dataset.ids.questions.clone(), kcs },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Interaction;

    fn toy() -> Dataset {
        let mapping = KcMapping::new(vec![vec![0], vec![0, 1]], 2).unwrap();
        let logs = vec![
            InteractionLog {
                student: 0,
                interactions: vec![
                    Interaction { order: 0, question: 0, response: true },
                    Interaction { order: 1, question: 1, response: false },
                ],
            },
            InteractionLog { student: 1, interactions: vec![Interaction { order: 3, question: 1, response: true }] },
        ];
        let ids = IdMaps {
            students: IdMap::from_raw_sorted(["s0".into(), "s1".into()]),
            questions: IdMap::from_raw_sorted(["q0".into(), "q1".into()]),
            kcs: IdMap::from_raw_sorted(["a".into(), "b".into()]),
        };
        Dataset { logs, mapping, ids }
    }

    #[test]
    fn hand_counted_stats() {
        let ds = toy();
        let s = compute_stats(&ds.logs, &ds.mapping).unwrap();
        assert_eq!((s.num_questions, s.num_kcs, s.num_students, s.num_kc_groups), (2, 2, 2, 2));
        assert_eq!(s.avg_kcs_per_question(), 1.5);
    }

    #[test]
    fn transform_doubles_sets() {
        let ds = toy();
        let t = corr_transform(&ds).unwrap();
        assert_eq!(t.mapping.kcs(1), Some(&[0, 1, 2, 3][..]));
        assert_eq!(t.ids.kcs.raw(2), Some("m2:a"));
        let (s, st) = (compute_stats(&ds.logs, &ds.mapping).unwrap(), compute_stats(&t.logs, &t.mapping).unwrap());
        assert_eq!(st.num_kcs, 2 * s.num_kcs);
        assert_eq!(st.kc_slots, 2 * s.kc_slots);
        assert_eq!(st.num_kc_groups, s.num_kc_groups);
        let tt = corr_transform(&t).unwrap();
        let stt = compute_stats(&tt.logs, &tt.mapping).unwrap();
        assert_eq!(stt.num_kcs, 4 * s.num_kcs);
        assert_eq!(stt.num_kc_groups, s.num_kc_groups);
    }

    #[test]
    fn empty_logs_error() {
        let ds = toy();
        assert!(matches!(compute_stats(&[], &ds.mapping), Err(Error::EmptyInput(_))));
    }
}
