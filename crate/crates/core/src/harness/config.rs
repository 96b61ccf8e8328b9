use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::synth::{SyntheticTask, SyntheticTaskConfig};
use super::{load_jsonl, sample_few_shot, DatasetSplit, Example, FewShot, HarnessError, SplitRole};
use crate::env::EnvConfig;
use crate::prompt::TaskSpec;
use crate::scoring::{RemoteConfig, RemoteScorer, Scorer};
use crate::seeds::{builtin_tasks, find_task, load_seeds};
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerChoice {
    #[default]
    Synthetic,
    Remote,
}

/// Everything that defines a run. Read from TOML; command-line flags are
/// applied on top by the caller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// `synthetic`, or a task name from the seed file.
    pub task: String,
    pub seed: u64,
    pub k_shots: usize,
    /// Labelled JSONL file; required unless the task is synthetic.
    pub dataset: Option<PathBuf>,
    /// Test JSONL file; defaults to dataset examples left after sampling.
    pub test_dataset: Option<PathBuf>,
    /// Alternative to the built-in seed file.
    pub seeds_file: Option<PathBuf>,
    pub scorer: ScorerChoice,
    pub endpoint: Option<String>,
    /// Feature dimension reported by the remote scorer.
    pub remote_feature_dim: usize,
    pub synthetic: SyntheticTaskConfig,
    /// Generated examples per class for the synthetic task.
    pub synthetic_examples_per_class: usize,
    pub env: EnvConfig,
    pub train: TrainConfig,
    /// Sample actions at evaluation instead of taking the argmax.
    pub sample_at_eval: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: "synthetic".into(),
            seed: 0,
            k_shots: 16,
            dataset: None,
            test_dataset: None,
            seeds_file: None,
            scorer: ScorerChoice::Synthetic,
            endpoint: None,
            remote_feature_dim: crate::scoring::DEFAULT_FEATURE_DIM,
            synthetic: SyntheticTaskConfig::default(),
            synthetic_examples_per_class: 200,
            env: EnvConfig::default(),
            train: TrainConfig::default(),
            sample_at_eval: false,
        }
    }
}

/// Resolved task, data splits and scorer for a run.
pub struct Prepared {
    pub task: TaskSpec,
    pub few_shot: FewShot,
    pub test: DatasetSplit,
    pub scorer: Box<dyn Scorer>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn is_synthetic(&self) -> bool {
        self.task == "synthetic"
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if !self.env.toggles.any() {
            return bad("at least one edit family must be enabled".into());
        }
        if self.k_shots == 0 {
            return bad("k_shots must be positive".into());
        }
        if self.env.n_exemplars > self.env.pool_size {
            return bad(format!(
                "{} exemplar slots exceed pool of {}",
                self.env.n_exemplars, self.env.pool_size
            ));
        }
        if self.scorer == ScorerChoice::Remote && self.endpoint.is_none() {
            return bad("the remote scorer needs an endpoint".into());
        }
        if !self.is_synthetic() && self.dataset.is_none() {
            return bad(format!("task {:?} needs a dataset file", self.task));
        }
        self.train
            .ppo
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))
    }

    /// Seeds this run's train seed from the top-level seed.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// Loads the task and data, samples the splits and builds the scorer.
    pub fn prepare(&self) -> Result<Prepared, HarnessError> {
        self.validate()?;
        let synthetic = self.is_synthetic().then(|| SyntheticTask::new(self.synthetic.clone()));
        let task = match &synthetic {
            Some(s) => s.task.clone(),
            None => {
                let tasks = match &self.seeds_file {
                    Some(p) => load_seeds(p),
                    None => Ok(builtin_tasks()),
                }
                .and_then(|t| find_task(t, &self.task))
                .map_err(|e| HarnessError::Config(e.to_string()))?;
                tasks
            }
        };
        let data: Vec<Example> = match (&self.dataset, &synthetic) {
            (Some(p), _) => load_jsonl(p, &task)?,
            (None, Some(s)) => s.generate(self.synthetic_examples_per_class, self.seed),
            (None, None) => unreachable!("validated"),
        };
        let few_shot = sample_few_shot(&data, task.num_labels(), self.k_shots, self.env.pool_size, self.seed)?;
        let test_records = match &self.test_dataset {
            Some(p) => load_jsonl(p, &task)?,
            None => {
                let used: BTreeSet<usize> = few_shot
                    .train_indices
                    .iter()
                    .chain(&few_shot.dev_indices)
                    .chain(&few_shot.pool_indices)
                    .copied()
                    .collect();
                data.iter()
                    .enumerate()
                    .filter(|(i, _)| !used.contains(i))
                    .map(|(_, e)| e.clone())
                    .collect()
            }
        };
        let scorer: Box<dyn Scorer> = match (self.scorer, &synthetic) {
            (ScorerChoice::Synthetic, Some(s)) => Box::new(s.scorer()),
            (ScorerChoice::Synthetic, None) => {
                return Err(HarnessError::Config(format!(
                    "the synthetic scorer only serves the synthetic task, not {:?}",
                    self.task
                )))
            }
            (ScorerChoice::Remote, _) => Box::new(RemoteScorer::new(RemoteConfig::new(
                self.endpoint.clone().expect("validated"),
                self.remote_feature_dim,
            ))),
        };
        Ok(Prepared {
            task,
            few_shot,
            test: DatasetSplit {
                role: SplitRole::Test,
                records: test_records,
            },
            scorer,
        })
    }
}
