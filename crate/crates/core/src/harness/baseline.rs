use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::eval::{predict, score_predictions, to_prediction, EvalReport, INIT_STREAM};
use super::{DatasetSplit, HarnessError};
use crate::env::{derive_seed, EnvError, Environment, EpisodeState, UniformPolicy};
use crate::scoring::compute_s;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    NoEdit,
    RandomEdit,
    GreedyEdit,
}

impl FromStr for BaselineKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "no-edit" => Ok(Self::NoEdit),
            "random-edit" => Ok(Self::RandomEdit),
            "greedy-edit" => Ok(Self::GreedyEdit),
            _ => Err(format!("unknown baseline {s:?} (no-edit, random-edit, greedy-edit)")),
        }
    }
}

/// What the greedy editor maximizes at each step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GreedyObjective {
    /// The labelled score; only usable when the label is known.
    Score { correct: usize },
    /// Top-1 minus top-2 log-probability.
    Margin,
}

/// One-step lookahead editing: every step tries each catalog action and
/// keeps the best one (first on ties).
pub fn greedy_edit(
    env: &Environment<'_>,
    query: &str,
    init_seed: u64,
    objective: GreedyObjective,
) -> Result<EpisodeState, EnvError> {
    let correct = match objective {
        GreedyObjective::Score { correct } => Some(correct),
        GreedyObjective::Margin => None,
    };
    let mut episode = env.reset(query, correct, None, init_seed)?;
    let weights = env.config().weights;
    while episode.step < env.config().horizon {
        let catalog = env.space().catalog(&episode.prompt);
        let values: Vec<f64> = catalog
            .actions()
            .par_iter()
            .map(|&a| {
                let mut trial = episode.clone();
                env.step(&mut trial, a)?;
                Ok(match objective {
                    GreedyObjective::Score { correct } => compute_s(&trial.observation, correct, weights)?,
                    GreedyObjective::Margin => trial.observation.margin(),
                })
            })
            .collect::<Result<_, EnvError>>()?;
        let best = (0..values.len()).fold(0, |b, i| if values[i] > values[b] { i } else { b });
        let action = catalog.get(best).ok_or(crate::policy::PolicyError::NoActions)?;
        env.step(&mut episode, action)?;
    }
    Ok(episode)
}

/// Scores a reference editor on `split`. The greedy editor uses the margin
/// objective since labels are unavailable at prediction time.
pub fn run_baseline(
    kind: BaselineKind,
    env: &Environment<'_>,
    split: &DatasetSplit,
    seed: u64,
) -> Result<EvalReport, HarnessError> {
    if split.is_empty() {
        return Err(HarnessError::EmptySplit);
    }
    let texts = split.texts();
    let preds = match kind {
        BaselineKind::NoEdit => predict(env, None, None, &texts, seed)?,
        BaselineKind::RandomEdit => predict(env, Some(&UniformPolicy), None, &texts, seed)?,
        BaselineKind::GreedyEdit => texts
            .par_iter()
            .enumerate()
            .map(|(i, q)| {
                let init_seed = derive_seed(seed, INIT_STREAM, i as u64);
                let before = env.initial_prompt(q, init_seed);
                let episode = greedy_edit(env, q, init_seed, GreedyObjective::Margin)?;
                to_prediction(env, i, before, episode)
            })
            .collect::<Result<_, EnvError>>()?,
    };
    score_predictions(preds, &split.labels(), env.config().weights)
}
