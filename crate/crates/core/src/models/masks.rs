use serde::{Deserialize, Serialize};

/// Square 0/1 matrix; `true` means attention is permitted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMatrix {
    n: usize,
    data: Vec<bool>,
}

impl BinaryMatrix {
    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        BinaryMatrix { n, data: (0..n * n).map(|k| f(k / n, k % n)).collect() }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.n + j]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Elementwise `self <= other`.
    pub fn le(&self, other: &BinaryMatrix) -> bool {
        self.n == other.n && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    pub fn to_rows(&self) -> Vec<Vec<u8>> {
        (0..self.n).map(|i| (0..self.n).map(|j| u8::from(self.get(i, j))).collect()).collect()
    }
}

/// Causal masks of the two AKT streams: lower triangular (`j <= i`) for
/// questions, strictly lower triangular (`j < i`) for responses.
pub fn akt_masks(n: usize) -> (BinaryMatrix, BinaryMatrix) {
    (BinaryMatrix::from_fn(n, |i, j| j <= i), BinaryMatrix::from_fn(n, |i, j| j < i))
}

/// Response-stream mask that also blocks every position of the same
/// question occurrence: `A[i][j] = 1` iff `j < i` and the groups differ.
pub fn qm_mask(group_ids: &[usize]) -> BinaryMatrix {
    BinaryMatrix::from_fn(group_ids.len(), |i, j| j < i && group_ids[i] != group_ids[j])
}
