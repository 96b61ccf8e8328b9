//! Label log-probabilities and state features for rendered prompts, and the
//! correct-vs-runner-up score that drives rewards.

mod remote;
mod synthetic;

pub use remote::{RemoteConfig, RemoteScorer, WireRequest, WireResponse};
pub use synthetic::{synthetic_score, FeatureBuilder, SyntheticParams, SyntheticScorer, DEFAULT_FEATURE_DIM};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompt::{ExemplarPool, PromptError, PromptState, TaskSpec};

/// Tolerance on `|sum(exp(log_probs)) - 1|`.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScoringError {
    #[error("scorer unavailable after {attempts} attempt(s): {message}")]
    ScorerUnavailable { attempts: usize, message: String },
    #[error("malformed scorer payload: {0}")]
    ProtocolError(String),
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("invalid scorer configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

impl ScoringError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, ScoringError::ScorerUnavailable { .. })
    }
}

/// Log-probabilities over the label words at the answer slot, plus a fixed
/// dimension feature vector describing the prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerObservation {
    pub label_log_probs: Vec<f64>,
    pub features: Vec<f64>,
}

impl ScorerObservation {
    pub fn check(&self, num_labels: usize, feature_dim: usize) -> Result<(), ScoringError> {
        let bad = |m: String| Err(ScoringError::ProtocolError(m));
        if self.label_log_probs.len() != num_labels {
            return bad(format!(
                "{} log-probs for {num_labels} labels",
                self.label_log_probs.len()
            ));
        }
        if self.features.len() != feature_dim {
            return bad(format!(
                "feature dimension {} (expected {feature_dim})",
                self.features.len()
            ));
        }
        if self
            .label_log_probs
            .iter()
            .chain(&self.features)
            .any(|v| !v.is_finite())
        {
            return bad("non-finite value".into());
        }
        if self.label_log_probs.iter().any(|&lp| lp > NORMALIZATION_TOLERANCE) {
            return bad("positive log-probability".into());
        }
        let mass: f64 = self.label_log_probs.iter().map(|lp| lp.exp()).sum();
        if (mass - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return bad(format!("probabilities sum to {mass}"));
        }
        Ok(())
    }

    /// Index of the most likely label; ties go to the lowest index.
    pub fn predicted(&self) -> usize {
        let mut best = 0;
        for (i, &lp) in self.label_log_probs.iter().enumerate() {
            if lp > self.label_log_probs[best] {
                best = i;
            }
        }
        best
    }

    /// Top-1 minus top-2 log-probability; a label-free confidence proxy.
    pub fn margin(&self) -> f64 {
        let mut sorted = self.label_log_probs.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        match sorted.as_slice() {
            [top, second, ..] => top - second,
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        Self {
            lambda1: 2.0,
            lambda2: 1.8,
        }
    }
}

impl ScoreWeights {
    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self, ScoringError> {
        let w = Self { lambda1, lambda2 };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), ScoringError> {
        if self.lambda1 > 0.0 && self.lambda2 > 0.0 {
            Ok(())
        } else {
            Err(ScoringError::InvalidConfig(format!(
                "score weights must be positive, got ({}, {})",
                self.lambda1, self.lambda2
            )))
        }
    }
}

/// `lambda1 * log P(correct) - lambda2 * max over other labels of log P`.
pub fn compute_s(
    obs: &ScorerObservation,
    correct: usize,
    weights: ScoreWeights,
) -> Result<f64, ScoringError> {
    let lp = &obs.label_log_probs;
    if lp.len() < 2 {
        return Err(ScoringError::InvalidTask(format!(
            "score needs at least two labels, got {}",
            lp.len()
        )));
    }
    if correct >= lp.len() {
        return Err(ScoringError::InvalidTask(format!(
            "label index {correct} outside {} labels",
            lp.len()
        )));
    }
    let runner_up = lp
        .iter()
        .enumerate()
        .filter(|&(c, _)| c != correct)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(weights.lambda1 * lp[correct] - weights.lambda2 * runner_up)
}

/// Everything a scorer may look at for one prompt.
#[derive(Debug, Clone, Copy)]
pub struct ScoreRequest<'a> {
    pub state: &'a PromptState,
    pub task: &'a TaskSpec,
    pub pool: &'a ExemplarPool,
    pub rendered: &'a str,
}

/// A frozen classifier that scores rendered prompts. Implementations must
/// tolerate concurrent calls.
pub trait Scorer: Send + Sync {
    fn score(&self, request: &ScoreRequest<'_>) -> Result<ScorerObservation, ScoringError>;

    fn feature_dim(&self) -> usize;
}

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}
