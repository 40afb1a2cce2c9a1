use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expansion::ExpandedSequence;
use crate::models::Model;
use crate::scalar::Scalar;

/// Largest own-step shift still counted as no leak.
pub const LEAK_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    LeakFree,
    Leaking,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub max_shift: f64,
    pub sampled_occurrences: usize,
    pub verdict: Verdict,
}

/// Flip the response of sampled multi-KC occurrences one at a time and
/// measure how far the predictions on that occurrence's own steps move.
pub fn leakage_probe<T: Scalar>(model: &Model<T>, windows: &[ExpandedSequence], samples: usize, seed: u64) -> Result<LeakageReport> {
    let policy = model.kind().label_policy();
    let windows: Vec<ExpandedSequence> = windows.iter().map(|w| w.relabel(policy)).collect();
    let candidates: Vec<(usize, usize)> = windows
        .iter()
        .enumerate()
        .flat_map(|(wi, w)| w.groups().into_iter().enumerate().filter(|(_, g)| g.len > 1).map(move |(gi, _)| (wi, gi)))
        .collect();
    if candidates.is_empty() {
        return Err(Error::Inconclusive("no multi-KC question occurrence to perturb".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = sample(&mut rng, candidates.len(), samples.clamp(1, candidates.len())).into_vec();
    picks.sort_unstable();
    // one unperturbed pass per window, one perturbed pass per pick
    let mut by_window: Vec<(usize, Vec<usize>)> = Vec::new();
    for &k in &picks {
        let (wi, gi) = candidates[k];
        match by_window.last_mut() {
            Some((w, gs)) if *w == wi => gs.push(gi),
            _ => by_window.push((wi, vec![gi])),
        }
    }
    let shifts: Vec<f64> = by_window
        .par_iter()
        .map(|(wi, gis)| {
            let w = &windows[*wi];
            let groups = w.groups();
            let base = model.predict(w)?;
            gis.iter().try_fold(0.0, |acc: f64, &gi| {
                let g = groups[gi];
                let flipped = model.predict(&w.with_flipped_occurrence(g.occurrence))?;
                Ok(g.range().map(|t| (base[t] - flipped[t]).abs().to_f64_lossy()).fold(acc, f64::max))
            })
        })
        .collect::<Result<_>>()?;
    let max_shift = shifts.into_iter().fold(0.0, f64::max);
    Ok(LeakageReport {
        max_shift,
        sampled_occurrences: picks.len(),
        verdict: if max_shift <= LEAK_TOLERANCE { Verdict::LeakFree } else { Verdict::Leaking },
    })
}
