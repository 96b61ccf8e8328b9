//! Datasets, few-shot splits, evaluation, baselines and run configuration.

mod baseline;
mod config;
mod eval;
mod synth;

pub use baseline::{greedy_edit, run_baseline, BaselineKind, GreedyObjective};
pub use config::{RunConfig, ScorerChoice};
pub use eval::{
    evaluate, mean_score, predict, score_predictions, EvalReport, Prediction, INIT_STREAM, POLICY_STREAM,
};
pub use synth::{SyntheticTask, SyntheticTaskConfig};

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::env::EnvError;
use crate::prompt::{Exemplar, ExemplarPool, TaskSpec};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("insufficient data: {}", describe_counts(.0))]
    InsufficientData(Vec<ClassCount>),
    #[error("split is empty")]
    EmptySplit,
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Examples available and needed for one class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassCount {
    pub label: usize,
    pub available: usize,
    pub needed: usize,
}

fn describe_counts(counts: &[ClassCount]) -> String {
    counts
        .iter()
        .map(|c| format!("label {} has {} of {} needed", c.label, c.available, c.needed))
        .collect::<Vec<_>>()
        .join(", ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub text: String,
    /// Index into the task's label space.
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitRole {
    Train,
    Dev,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub role: SplitRole,
    pub records: Vec<Example>,
}

impl DatasetSplit {
    pub fn texts(&self) -> Vec<String> {
        self.records.iter().map(|e| e.text.clone()).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|e| e.label).collect()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Deserialize)]
struct RawRecord {
    text: String,
    label: serde_json::Value,
}

/// Parses `{"text": ..., "label": ...}` lines; labels may be label names or
/// indices. Blank lines are skipped.
pub fn parse_jsonl(text: &str, task: &TaskSpec) -> Result<Vec<Example>, HarnessError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let perr = |message: String| HarnessError::Parse { line: i + 1, message };
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| perr(e.to_string()))?;
        let label = match &raw.label {
            serde_json::Value::String(s) => task.label_index(s),
            serde_json::Value::Number(n) => n.as_u64().map(|v| v as usize).filter(|&v| v < task.num_labels()),
            _ => None,
        }
        .ok_or_else(|| perr(format!("label {} not in the label space", raw.label)))?;
        out.push(Example { text: raw.text, label });
    }
    Ok(out)
}

pub fn load_jsonl(path: &Path, task: &TaskSpec) -> Result<Vec<Example>, HarnessError> {
    parse_jsonl(&std::fs::read_to_string(path)?, task)
}

/// Few-shot train and dev splits plus the exemplar pool, all disjoint.
#[derive(Debug, Clone, PartialEq)]
pub struct FewShot {
    pub train: DatasetSplit,
    pub dev: DatasetSplit,
    pub pool: ExemplarPool,
    /// Dataset positions of train, dev and pool members.
    pub train_indices: Vec<usize>,
    pub dev_indices: Vec<usize>,
    pub pool_indices: Vec<usize>,
}

/// Pool share of each class: `pool_size / C`, remainder to the lowest labels.
fn pool_shares(pool_size: usize, num_labels: usize) -> Vec<usize> {
    (0..num_labels)
        .map(|c| pool_size / num_labels + usize::from(c < pool_size % num_labels))
        .collect()
}

/// Draws `k` train and `k` dev examples per class and a class-balanced pool
/// of `pool_size` from the rest.
pub fn sample_few_shot(
    dataset: &[Example],
    num_labels: usize,
    k: usize,
    pool_size: usize,
    seed: u64,
) -> Result<FewShot, HarnessError> {
    if num_labels == 0 {
        return Err(HarnessError::Config("task has no labels".into()));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_labels];
    for (i, e) in dataset.iter().enumerate() {
        if e.label >= num_labels {
            return Err(HarnessError::Config(format!("example {i} has label {} outside {num_labels}", e.label)));
        }
        by_class[e.label].push(i);
    }
    let shares = pool_shares(pool_size, num_labels);
    let short: Vec<ClassCount> = by_class
        .iter()
        .zip(&shares)
        .enumerate()
        .filter(|(_, (idx, &share))| idx.len() < 2 * k + share)
        .map(|(label, (idx, &share))| ClassCount {
            label,
            available: idx.len(),
            needed: 2 * k + share,
        })
        .collect();
    if !short.is_empty() {
        return Err(HarnessError::InsufficientData(short));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut dev, mut pool) = (Vec::new(), Vec::new(), Vec::new());
    for (idx, &share) in by_class.iter_mut().zip(&shares) {
        idx.shuffle(&mut rng);
        train.extend_from_slice(&idx[..k]);
        dev.extend_from_slice(&idx[k..2 * k]);
        pool.extend_from_slice(&idx[2 * k..2 * k + share]);
    }
    train.shuffle(&mut rng);
    dev.shuffle(&mut rng);
    pool.shuffle(&mut rng);
    let split = |role, idx: &[usize]| DatasetSplit {
        role,
        records: idx.iter().map(|&i| dataset[i].clone()).collect(),
    };
    Ok(FewShot {
        train: split(SplitRole::Train, &train),
        dev: split(SplitRole::Dev, &dev),
        pool: ExemplarPool::new(
            pool.iter()
                .map(|&i| Exemplar {
                    id: 0,
                    text: dataset[i].text.clone(),
                    label: dataset[i].label,
                })
                .collect(),
        ),
        train_indices: train,
        dev_indices: dev,
        pool_indices: pool,
    })
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use proptest::prelude::*;

    use super::*;

    fn data(per_class: &[usize]) -> Vec<Example> {
        per_class
            .iter()
            .enumerate()
            .flat_map(|(label, &n)| {
                (0..n).map(move |i| Example {
                    text: format!("example {label} {i}"),
                    label,
                })
            })
            .collect()
    }

    #[test]
    fn two_class_sizes() {
        let fs = sample_few_shot(&data(&[60, 60]), 2, 16, 16, 0).unwrap();
        assert_eq!(fs.train.len(), 32);
        assert_eq!(fs.dev.len(), 32);
        assert_eq!(fs.pool.len(), 16);
        for split in [&fs.train, &fs.dev] {
            assert_eq!(split.labels().iter().filter(|&&l| l == 0).count(), 16);
        }
        assert_eq!(fs.pool.iter().filter(|e| e.label == 1).count(), 8);
    }

    #[test]
    fn same_seed_same_split() {
        let d = data(&[40, 45, 50]);
        assert_eq!(sample_few_shot(&d, 3, 8, 7, 3).unwrap(), sample_few_shot(&d, 3, 8, 7, 3).unwrap());
        assert_ne!(
            sample_few_shot(&d, 3, 8, 7, 3).unwrap().train_indices,
            sample_few_shot(&d, 3, 8, 7, 4).unwrap().train_indices
        );
    }

    #[test]
    fn insufficient_data_reports_counts() {
        match sample_few_shot(&data(&[40, 20]), 2, 8, 10, 0) {
            Err(HarnessError::InsufficientData(c)) => {
                assert_eq!(c, vec![ClassCount { label: 1, available: 20, needed: 21 }]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn parses_names_and_indices() {
        let task = crate::seeds::find_task(crate::seeds::builtin_tasks(), "sst2").unwrap();
        let text = "{\"text\": \"fine\", \"label\": \"positive\"}\n\n{\"text\": \"bad\", \"label\": 0}\n";
        let ex = parse_jsonl(text, &task).unwrap();
        assert_eq!(ex[0].label, 1);
        assert_eq!(ex[1].label, 0);
        assert!(matches!(
            parse_jsonl("{\"text\": \"x\", \"label\": \"meh\"}", &task),
            Err(HarnessError::Parse { line: 1, .. })
        ));
        assert!(parse_jsonl("{\"text\": \"x\", \"label\": 2}", &task).is_err());
    }

    proptest! {
        #[test]
        fn splits_are_disjoint(seed in any::<u64>(), k in 1usize..6, pool in 0usize..9) {
            let fs = sample_few_shot(&data(&[20, 25]), 2, k, pool, seed).unwrap();
            let sets: Vec<BTreeSet<usize>> = [&fs.train_indices, &fs.dev_indices, &fs.pool_indices]
                .iter()
                .map(|v| v.iter().copied().collect())
                .collect();
            prop_assert!(sets[0].is_disjoint(&sets[1]));
            prop_assert!(sets[0].is_disjoint(&sets[2]));
            prop_assert!(sets[1].is_disjoint(&sets[2]));
            prop_assert_eq!(sets[2].len(), pool);
        }
    }
}
