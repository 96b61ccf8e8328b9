use rayon::prelude::*;
use serde::Serialize;

use super::{DatasetSplit, HarnessError};
use crate::checkpoint::Checkpoint;
use crate::env::{derive_seed, edit_query, AttentionPolicy, EditPolicy, EnvError, Environment, EpisodeState};
use crate::policy::RunningMoments;
use crate::prompt::{render, PromptState};
use crate::scoring::{compute_s, ScoreWeights, ScorerObservation};
use crate::train::checkpoint_meta;

/// Seed streams shared by every evaluation path so that all methods start
/// each query from the same initial prompt.
pub const INIT_STREAM: u64 = 1;
pub const POLICY_STREAM: u64 = 2;

/// Outcome for one query, with the prompt before and after editing.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub index: usize,
    pub predicted: usize,
    pub observation: ScorerObservation,
    pub before: PromptState,
    pub after: PromptState,
    pub before_text: String,
    pub after_text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// Mean score of the final prompts under the true labels.
    pub mean_score: f64,
    pub predictions: Vec<Prediction>,
}

pub(crate) fn to_prediction(
    env: &Environment<'_>,
    index: usize,
    before: PromptState,
    episode: EpisodeState,
) -> Result<Prediction, EnvError> {
    let before_text = render(&before, env.task(), env.pool())?;
    let after_text = render(&episode.prompt, env.task(), env.pool())?;
    Ok(Prediction {
        index,
        predicted: episode.observation.predicted(),
        observation: episode.observation,
        after: episode.prompt,
        before,
        before_text,
        after_text,
    })
}

/// Edits and classifies each query. Only query text is visible here; with
/// no policy the initial prompt is scored as is.
pub fn predict(
    env: &Environment<'_>,
    policy: Option<&dyn EditPolicy>,
    moments: Option<&RunningMoments>,
    queries: &[String],
    seed: u64,
) -> Result<Vec<Prediction>, EnvError> {
    queries
        .par_iter()
        .enumerate()
        .map(|(i, q)| {
            let init_seed = derive_seed(seed, INIT_STREAM, i as u64);
            let before = env.initial_prompt(q, init_seed);
            let episode = match policy {
                Some(p) => edit_query(
                    env,
                    p,
                    q,
                    Some(before.clone()),
                    init_seed,
                    derive_seed(seed, POLICY_STREAM, i as u64),
                    moments,
                )?,
                None => env.reset(q, None, Some(before.clone()), init_seed)?,
            };
            to_prediction(env, i, before, episode)
        })
        .collect()
}

/// Mean score of each prediction's final prompt under `labels`.
pub fn mean_score(predictions: &[Prediction], labels: &[usize], weights: ScoreWeights) -> Result<f64, HarnessError> {
    let total = predictions
        .iter()
        .zip(labels)
        .map(|(p, &y)| compute_s(&p.observation, y, weights))
        .sum::<Result<f64, _>>()
        .map_err(EnvError::from)?;
    Ok(total / predictions.len() as f64)
}

/// Compares predictions with labels once every prediction is made.
pub fn score_predictions(
    predictions: Vec<Prediction>,
    labels: &[usize],
    weights: ScoreWeights,
) -> Result<EvalReport, HarnessError> {
    if predictions.is_empty() {
        return Err(HarnessError::EmptySplit);
    }
    if predictions.len() != labels.len() {
        return Err(HarnessError::Config(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let correct = predictions.iter().zip(labels).filter(|(p, &y)| p.predicted == y).count();
    Ok(EvalReport {
        accuracy: correct as f64 / labels.len() as f64,
        mean_score: mean_score(&predictions, labels, weights)?,
        predictions,
    })
}

/// Runs the checkpoint's policy over `split`: greedy argmax edits unless
/// `sample` is set.
pub fn evaluate(
    checkpoint: &Checkpoint,
    env: &Environment<'_>,
    split: &DatasetSplit,
    seed: u64,
    sample: bool,
) -> Result<EvalReport, HarnessError> {
    if split.is_empty() {
        return Err(HarnessError::EmptySplit);
    }
    checkpoint
        .meta
        .ensure_compatible(&checkpoint_meta(env, checkpoint.meta.net, 0))?;
    let policy = AttentionPolicy {
        params: &checkpoint.params,
        greedy: !sample,
    };
    let preds = predict(env, Some(&policy), Some(&checkpoint.moments), &split.texts(), seed)?;
    score_predictions(preds, &split.labels(), env.config().weights)
}
