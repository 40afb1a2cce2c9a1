//! Question-level logs to KC-level sequences, and question-budget windowing.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{InteractionLog, KcMapping};
use crate::error::{Error, Result};

/// Reserved id carried by padding steps.
pub const PAD_ID: usize = usize::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputLabel {
    Incorrect,
    Correct,
    Mask,
}

impl InputLabel {
    pub fn from_response(correct: bool) -> Self {
        if correct {
            InputLabel::Correct
        } else {
            InputLabel::Incorrect
        }
    }

    /// Row index in response-embedding tables: 0, 1, and 2 for the mask label.
    pub fn index(self) -> usize {
        match self {
            InputLabel::Incorrect => 0,
            InputLabel::Correct => 1,
            InputLabel::Mask => 2,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            InputLabel::Incorrect => InputLabel::Correct,
            InputLabel::Correct => InputLabel::Incorrect,
            InputLabel::Mask => InputLabel::Mask,
        }
    }

    fn code(self) -> &'static str {
        match self {
            InputLabel::Incorrect => "0",
            InputLabel::Correct => "1",
            InputLabel::Mask => "MASK",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelPolicy {
    GroundTruth,
    /// Only the last KC of each question carries the response.
    MaskLast,
}

/// One (question, KC) step of an expanded sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpandedStep {
    pub question: usize,
    pub kc: usize,
    pub input_label: InputLabel,
    pub target: bool,
    /// Index of the originating question occurrence in the student's full log.
    pub occurrence: usize,
    pub group_index: usize,
    pub group_size: usize,
}

impl ExpandedStep {
    pub fn is_last_in_group(&self) -> bool {
        self.group_index + 1 == self.group_size
    }

    pub fn is_pad(&self) -> bool {
        self.question == PAD_ID
    }

    pub fn pad() -> Self {
        ExpandedStep {
            question: PAD_ID,
            kc: PAD_ID,
            input_label: InputLabel::Mask,
            target: false,
            occurrence: PAD_ID,
            group_index: 0,
            group_size: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpandedSequence {
    pub student: usize,
    pub steps: Vec<ExpandedStep>,
    pub question_count: usize,
}

/// Contiguous step range of one question occurrence inside a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Group {
    pub occurrence: usize,
    pub start: usize,
    pub len: usize,
}

impl Group {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

impl ExpandedSequence {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Question-occurrence groups in order, ignoring padding.
    pub fn groups(&self) -> Vec<Group> {
        let mut groups: Vec<Group> = Vec::new();
        for (i, step) in self.steps.iter().enumerate() {
            if step.is_pad() {
                break;
            }
            if step.group_index == 0 {
                groups.push(Group { occurrence: step.occurrence, start: i, len: 1 });
            } else if let Some(g) = groups.last_mut() {
                g.len += 1;
            }
        }
        groups
    }

    /// Number of leading non-pad steps.
    pub fn valid_len(&self) -> usize {
        self.steps.iter().take_while(|s| !s.is_pad()).count()
    }

    /// One (question, response) per group.
    pub fn collapse(&self) -> Vec<(usize, bool)> {
        self.groups().iter().map(|g| (self.steps[g.start].question, self.steps[g.start].target)).collect()
    }

    /// Copy with every step's input label re-derived under `policy`.
    pub fn relabel(&self, policy: LabelPolicy) -> Self {
        let mut out = self.clone();
        for step in out.steps.iter_mut().filter(|s| !s.is_pad()) {
            step.input_label = label_for(policy, step.target, step.is_last_in_group());
        }
        out
    }

    /// Copy with the response of one occurrence flipped in targets and in
    /// every non-mask input label.
    pub fn with_flipped_occurrence(&self, occurrence: usize) -> Self {
        let mut out = self.clone();
        for step in out.steps.iter_mut().filter(|s| s.occurrence == occurrence && !s.is_pad()) {
            step.target = !step.target;
            step.input_label = step.input_label.flipped();
        }
        out
    }

    /// Pad to `capacity` steps; the mask marks the real steps.
    pub fn padded(&self, capacity: usize) -> (Vec<ExpandedStep>, Vec<bool>) {
        let mut steps = self.steps.clone();
        let mut valid = vec![true; steps.len()];
        while steps.len() < capacity {
            steps.push(ExpandedStep::pad());
            valid.push(false);
        }
        (steps, valid)
    }
}

fn label_for(policy: LabelPolicy, target: bool, last: bool) -> InputLabel {
    match policy {
        LabelPolicy::MaskLast if !last => InputLabel::Mask,
        _ => InputLabel::from_response(target),
    }
}

/// Replace each question by its KCs in ascending KC id order.
pub fn expand(log: &InteractionLog, mapping: &KcMapping, policy: LabelPolicy) -> Result<ExpandedSequence> {
    let mut steps = Vec::new();
    for (occurrence, it) in log.interactions.iter().enumerate() {
        let kcs = mapping
            .kcs(it.question)
            .ok_or_else(|| Error::Validation(format!("question {} is not in the KC mapping", it.question)))?;
        let group_size = kcs.len();
        for (group_index, &kc) in kcs.iter().enumerate() {
            steps.push(ExpandedStep {
                question: it.question,
                kc,
                input_label: label_for(policy, it.response, group_index + 1 == group_size),
                target: it.response,
                occurrence,
                group_index,
                group_size,
            });
        }
    }
    Ok(ExpandedSequence { student: log.student, steps, question_count: log.interactions.len() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanLevel {
    KcStep,
    Question,
}

/// Windows holding at most `window_questions` question occurrences each.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowPlan {
    pub window_questions: usize,
    /// Largest group size the plan must accommodate; step capacity is
    /// `window_questions * max_group_size`.
    pub max_group_size: usize,
    pub level: PlanLevel,
    pub windows: Vec<ExpandedSequence>,
}

impl WindowPlan {
    pub fn step_capacity(&self) -> usize {
        self.window_questions * self.max_group_size
    }

    /// Every (student, occurrence, window start) the plan evaluates, with multiplicity.
    pub fn targets(&self) -> BTreeMap<(usize, usize, usize), usize> {
        let mut out = BTreeMap::new();
        for w in &self.windows {
            let groups = w.groups();
            let Some(first) = groups.first() else { continue };
            for g in &groups {
                *out.entry((w.student, g.occurrence, first.occurrence)).or_insert(0) += 1;
            }
        }
        out
    }
}

/// Slice a sequence into consecutive windows of at most `window_questions`
/// occurrences. Groups never straddle a boundary and nothing is dropped.
pub fn window(sequence: &ExpandedSequence, window_questions: usize) -> WindowPlan {
    let max_group_size = sequence.steps.iter().map(|s| s.group_size).max().unwrap_or(1);
    window_with_capacity(std::slice::from_ref(sequence), window_questions, max_group_size, PlanLevel::KcStep)
}

/// Window many sequences under one shared question budget.
pub fn window_with_capacity(
    sequences: &[ExpandedSequence],
    window_questions: usize,
    max_group_size: usize,
    level: PlanLevel,
) -> WindowPlan {
    let w = window_questions.max(1);
    let mut windows = Vec::new();
    for seq in sequences {
        let groups = seq.groups();
        for chunk in groups.chunks(w) {
            let start = chunk[0].start;
            let end = chunk.last().map(|g| g.start + g.len).unwrap_or(start);
            windows.push(ExpandedSequence {
                student: seq.student,
                steps: seq.steps[start..end].to_vec(),
                question_count: chunk.len(),
            });
        }
    }
    WindowPlan { window_questions: w, max_group_size: max_group_size.max(1), level, windows }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Divergence {
    pub plan: String,
    pub student: usize,
    pub occurrence: usize,
    pub window_start: usize,
    /// Count in the reference plan minus count in this plan.
    pub delta: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub fair: bool,
    pub reference: String,
    pub targets_compared: usize,
    pub divergences: Vec<Divergence>,
}

/// True iff every plan evaluates the identical multiset of
/// (student, occurrence, window start) targets as the first plan.
pub fn fairness_check(plans: &[(String, &WindowPlan)]) -> FairnessReport {
    let Some((ref_name, reference)) = plans.first() else {
        return FairnessReport { fair: true, reference: String::new(), targets_compared: 0, divergences: vec![] };
    };
    let ref_targets = reference.targets();
    let mut divergences = Vec::new();
    for (name, plan) in &plans[1..] {
        let targets = plan.targets();
        let keys: std::collections::BTreeSet<_> = ref_targets.keys().chain(targets.keys()).collect();
        for key in keys {
            let a = ref_targets.get(key).copied().unwrap_or(0) as i64;
            let b = targets.get(key).copied().unwrap_or(0) as i64;
            if a != b {
                divergences.push(Divergence {
                    plan: name.clone(),
                    student: key.0,
                    occurrence: key.1,
                    window_start: key.2,
                    delta: a - b,
                });
            }
        }
    }
    FairnessReport {
        fair: divergences.is_empty(),
        reference: ref_name.clone(),
        targets_compared: ref_targets.values().sum(),
        divergences,
    }
}

/// One tab-separated line per step: student, question, kc, input label,
/// target, occurrence, group index, group size, last flag.
pub fn debug_dump(sequence: &ExpandedSequence) -> String {
    let mut out = String::new();
    for s in &sequence.steps {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            sequence.student,
            s.question,
            s.kc,
            s.input_label.code(),
            u8::from(s.target),
            s.occurrence,
            s.group_index,
            s.group_size,
            u8::from(s.is_last_in_group())
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Interaction;
    use proptest::prelude::*;

    fn log(questions: &[(usize, bool)]) -> InteractionLog {
        InteractionLog {
            student: 3,
            interactions: questions
                .iter()
                .enumerate()
                .map(|(i, &(q, r))| Interaction { order: i as u64, question: q, response: r })
                .collect(),
        }
    }

    fn three_kc_mapping() -> KcMapping {
        KcMapping::new(vec![vec![0, 1, 2], vec![1], vec![0, 2]], 3).unwrap()
    }

    fn labels(seq: &ExpandedSequence) -> Vec<(usize, usize, InputLabel)> {
        seq.steps.iter().map(|s| (s.question, s.kc, s.input_label)).collect()
    }

    #[test]
    fn ground_truth_expansion() {
        let seq = expand(&log(&[(0, true)]), &three_kc_mapping(), LabelPolicy::GroundTruth).unwrap();
        use InputLabel::*;
        assert_eq!(labels(&seq), vec![(0, 0, Correct), (0, 1, Correct), (0, 2, Correct)]);
    }

    #[test]
    fn mask_last_expansion() {
        let seq = expand(&log(&[(0, true)]), &three_kc_mapping(), LabelPolicy::MaskLast).unwrap();
        use InputLabel::*;
        assert_eq!(labels(&seq), vec![(0, 0, Mask), (0, 1, Mask), (0, 2, Correct)]);
        assert!(seq.steps.iter().all(|s| s.target));
        assert!(seq.steps[2].is_last_in_group());
    }

    #[test]
    fn singleton_group_is_unmasked() {
        for policy in [LabelPolicy::GroundTruth, LabelPolicy::MaskLast] {
            let seq = expand(&log(&[(1, false)]), &three_kc_mapping(), policy).unwrap();
            assert_eq!(seq.steps.len(), 1);
            assert_eq!(seq.steps[0].input_label, InputLabel::Incorrect);
        }
    }

    #[test]
    fn unmapped_question_errors() {
        assert!(expand(&log(&[(7, true)]), &three_kc_mapping(), LabelPolicy::GroundTruth).is_err());
    }

    #[test]
    fn three_occurrences_budget_two() {
        let seq = expand(&log(&[(1, true), (1, false), (1, true)]), &three_kc_mapping(), LabelPolicy::GroundTruth).unwrap();
        let plan = window(&seq, 2);
        let covered: Vec<Vec<usize>> = plan.windows.iter().map(|w| w.groups().iter().map(|g| g.occurrence).collect()).collect();
        assert_eq!(covered, vec![vec![0, 1], vec![2]]);
        // single-KC questions: step count equals question count
        assert!(plan.windows.iter().all(|w| w.len() == w.question_count));
    }

    #[test]
    fn group_sizes_two_three_one() {
        let mapping = KcMapping::new(vec![vec![0, 1], vec![0, 1, 2], vec![2]], 3).unwrap();
        let seq = expand(&log(&[(0, true), (1, false), (2, true)]), &mapping, LabelPolicy::GroundTruth).unwrap();
        let plan = window(&seq, 2);
        assert_eq!(plan.windows.iter().map(ExpandedSequence::len).collect::<Vec<_>>(), vec![5, 1]);
        assert_eq!(plan.step_capacity(), 6);
        let (padded, valid) = plan.windows[1].padded(plan.step_capacity());
        assert_eq!(padded.len(), 6);
        assert_eq!(valid.iter().filter(|v| **v).count(), 1);
    }

    #[test]
    fn fairness_identical_plans() {
        let seq = expand(&log(&[(0, true), (2, false)]), &three_kc_mapping(), LabelPolicy::GroundTruth).unwrap();
        let (a, b) = (window(&seq, 5), window(&seq, 5));
        assert!(fairness_check(&[("a".into(), &a), ("b".into(), &b)]).fair);
    }

    #[test]
    fn fairness_detects_window_mismatch() {
        let qs: Vec<(usize, bool)> = (0..60).map(|i| (1, i % 3 == 0)).collect();
        let seq = expand(&log(&qs), &three_kc_mapping(), LabelPolicy::GroundTruth).unwrap();
        let (big, small) = (window(&seq, 100), window(&seq, 50));
        let report = fairness_check(&[("w100".into(), &big), ("w50".into(), &small)]);
        assert!(!report.fair);
        let mut occ: Vec<usize> = report.divergences.iter().map(|d| d.occurrence).collect();
        occ.dedup();
        assert_eq!(occ, (50..60).collect::<Vec<_>>());
    }

    #[test]
    fn expansion_does_not_change_coverage() {
        let qs: Vec<(usize, bool)> = (0..23).map(|i| (i % 3, i % 2 == 0)).collect();
        let mapping = three_kc_mapping();
        let expanded = expand(&log(&qs), &mapping, LabelPolicy::MaskLast).unwrap();
        let single = KcMapping::new(vec![vec![0], vec![1], vec![2]], 3).unwrap();
        let flat = expand(&log(&qs), &single, LabelPolicy::GroundTruth).unwrap();
        let a = window_with_capacity(&[expanded], 10, 3, PlanLevel::KcStep);
        let b = window_with_capacity(&[flat], 10, 1, PlanLevel::Question);
        assert!(fairness_check(&[("kc".into(), &a), ("question".into(), &b)]).fair);
    }

    #[test]
    fn debug_dump_golden() {
        let seq = expand(&log(&[(2, false), (1, true)]), &three_kc_mapping(), LabelPolicy::MaskLast).unwrap();
        let golden = "3\t2\t0\tMASK\t0\t0\t0\t2\t0\n\
                      3\t2\t2\t0\t0\t0\t1\t2\t1\n\
                      3\t1\t1\t1\t1\t1\t0\t1\t1\n";
        assert_eq!(debug_dump(&seq), golden);
    }

    fn arb_case() -> impl Strategy<Value = (Vec<Vec<usize>>, Vec<(usize, bool)>, usize)> {
        proptest::collection::vec(proptest::collection::btree_set(0usize..6, 1..4), 1..6).prop_flat_map(|sets| {
            let n = sets.len();
            let sets: Vec<Vec<usize>> = sets.into_iter().map(|s| s.into_iter().collect()).collect();
            (Just(sets), proptest::collection::vec((0..n, any::<bool>()), 0..40), 1usize..8)
        })
    }

    proptest! {
        #[test]
        fn expansion_properties((sets, qs, w) in arb_case()) {
            let mapping = KcMapping::new(sets.clone(), 6).unwrap();
            let log = log(&qs);
            let gt = expand(&log, &mapping, LabelPolicy::GroundTruth).unwrap();
            let ml = expand(&log, &mapping, LabelPolicy::MaskLast).unwrap();
            let expected_len: usize = qs.iter().map(|(q, _)| sets[*q].len()).sum();
            prop_assert_eq!(gt.len(), expected_len);
            prop_assert_eq!(gt.collapse(), qs.clone());
            let masks = ml.steps.iter().filter(|s| s.input_label == InputLabel::Mask).count();
            let expected_masks: usize = qs.iter().map(|(q, _)| sets[*q].len() - 1).sum();
            prop_assert_eq!(masks, expected_masks);
            for s in &gt.steps {
                prop_assert!(s.group_index < s.group_size);
                prop_assert_eq!(s.is_last_in_group(), s.group_index == s.group_size - 1);
            }
            let plan = window(&gt, w);
            let rebuilt: Vec<ExpandedStep> = plan.windows.iter().flat_map(|x| x.steps.iter().copied()).collect();
            prop_assert_eq!(rebuilt, gt.steps.clone());
            for win in &plan.windows {
                prop_assert!(win.question_count <= w);
                prop_assert_eq!(win.steps[0].group_index, 0);
                prop_assert!(win.steps.last().unwrap().is_last_in_group());
            }
        }
    }
}
