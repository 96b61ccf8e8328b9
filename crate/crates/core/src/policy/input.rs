use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// One past action as seen by the policy: its kind and the candidate
/// features it had when it was chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub kind: usize,
    pub features: Vec<f64>,
}

/// Taken actions in order, holding at most `capacity` entries. When full,
/// the oldest entry is dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionHistory {
    capacity: usize,
    entries: Vec<HistoryEntry>,
}

impl ActionHistory {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: Vec::with_capacity(capacity),
        }
    }

    pub fn push(&mut self, entry: HistoryEntry) {
        if self.capacity == 0 {
            return;
        }
        if self.entries.len() == self.capacity {
            self.entries.remove(0);
        }
        self.entries.push(entry);
    }

    pub fn entries(&self) -> &[HistoryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }
}

/// Everything the network sees for one decision.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyInput {
    /// Normalized observation features.
    pub observation: Vec<f64>,
    /// One row per catalog entry, in catalog order.
    pub candidates: Array2<f64>,
    /// Action kind of each candidate (indexes the family embedding table).
    pub kinds: Vec<usize>,
    pub history: ActionHistory,
    /// `true` for selectable candidates.
    pub mask: Vec<bool>,
}

impl PolicyInput {
    pub fn num_candidates(&self) -> usize {
        self.candidates.nrows()
    }
}
