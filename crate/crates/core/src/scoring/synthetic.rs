//! Deterministic lexical-overlap scorer used for desk-scale training and as
//! an oracle in tests.
//!
//! For label `c` the logit is
//! `alpha * overlap_c + beta * [query verbalizer == preferred(c)] + gamma / (1 + l)`
//! where `overlap_c` counts query words shared with the exemplars labelled
//! `c` currently in the prompt and `l` is the number of instruction phrases.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{log_softmax, ScoreRequest, Scorer, ScorerObservation, ScoringError};
use crate::prompt::{lexical_tokens, ExemplarPool, PromptState, TaskSpec};

pub const DEFAULT_FEATURE_DIM: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Verbalizer id favoured by each label; labels beyond the list have no
    /// preference.
    pub preferred_verbalizer: Vec<usize>,
    pub feature_dim: usize,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 0.5,
            preferred_verbalizer: Vec::new(),
            feature_dim: DEFAULT_FEATURE_DIM,
        }
    }
}

/// Per-label query overlap with the exemplars currently in the prompt.
pub fn label_overlaps(
    state: &PromptState,
    num_labels: usize,
    pool: &ExemplarPool,
    query_tokens: &BTreeSet<String>,
) -> Vec<f64> {
    let mut unions: Vec<BTreeSet<&str>> = vec![BTreeSet::new(); num_labels];
    for &id in &state.exemplar_slots {
        unions[pool[id].label].extend(pool.tokens(id).iter().map(String::as_str));
    }
    unions
        .iter()
        .map(|u| query_tokens.iter().filter(|t| u.contains(t.as_str())).count() as f64)
        .collect()
}

/// Hand-built state summary: per-label overlaps, one-hot query verbalizer,
/// phrase count and slot count, zero-padded to `dim`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureBuilder {
    pub dim: usize,
}

impl FeatureBuilder {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }

    pub fn required_dim(task: &TaskSpec) -> usize {
        task.num_labels() + task.num_verbalizers() + 2
    }

    pub fn check(&self, task: &TaskSpec) -> Result<(), ScoringError> {
        let need = Self::required_dim(task);
        if need > self.dim {
            return Err(ScoringError::InvalidConfig(format!(
                "feature dimension {} too small for task {:?} (needs {need})",
                self.dim, task.task_name
            )));
        }
        Ok(())
    }

    pub fn build_with_overlaps(&self, state: &PromptState, task: &TaskSpec, overlaps: &[f64]) -> Vec<f64> {
        let mut f = Vec::with_capacity(self.dim);
        f.extend_from_slice(overlaps);
        let onehot_start = f.len();
        f.resize(onehot_start + task.num_verbalizers(), 0.0);
        f[onehot_start + state.query_verbalizer()] = 1.0;
        f.push(state.num_phrases() as f64);
        f.push(state.num_slots() as f64);
        assert!(f.len() <= self.dim, "feature dimension checked at construction");
        f.resize(self.dim, 0.0);
        f
    }

    pub fn build(&self, state: &PromptState, task: &TaskSpec, pool: &ExemplarPool) -> Vec<f64> {
        let q = lexical_tokens(&state.query);
        let overlaps = label_overlaps(state, task.num_labels(), pool, &q);
        self.build_with_overlaps(state, task, &overlaps)
    }
}

/// Scores `state` directly from its structure.
pub fn synthetic_score(
    state: &PromptState,
    task: &TaskSpec,
    pool: &ExemplarPool,
    params: &SyntheticParams,
) -> Result<ScorerObservation, ScoringError> {
    let builder = FeatureBuilder::new(params.feature_dim);
    builder.check(task)?;
    let q = lexical_tokens(&state.query);
    let overlaps = label_overlaps(state, task.num_labels(), pool, &q);
    let query_verbalizer = state.query_verbalizer();
    let instruction_term = params.gamma / (1.0 + state.num_phrases() as f64);
    let logits: Vec<f64> = overlaps
        .iter()
        .enumerate()
        .map(|(c, &ov)| {
            let preferred = params.preferred_verbalizer.get(c) == Some(&query_verbalizer);
            params.alpha * ov + if preferred { params.beta } else { 0.0 } + instruction_term
        })
        .collect();
    Ok(ScorerObservation {
        label_log_probs: log_softmax(&logits),
        features: builder.build_with_overlaps(state, task, &overlaps),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScorer {
    pub params: SyntheticParams,
}

impl SyntheticScorer {
    pub fn new(params: SyntheticParams, task: &TaskSpec) -> Result<Self, ScoringError> {
        FeatureBuilder::new(params.feature_dim).check(task)?;
        Ok(Self { params })
    }
}

impl Scorer for SyntheticScorer {
    fn score(&self, request: &ScoreRequest<'_>) -> Result<ScorerObservation, ScoringError> {
        synthetic_score(request.state, request.task, request.pool, &self.params)
    }

    fn feature_dim(&self) -> usize {
        self.params.feature_dim
    }
}
