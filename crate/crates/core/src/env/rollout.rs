use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::{EnvError, Environment, EpisodeState};
use crate::policy::{
    greedy_index, masked_log_softmax, sample_index, PolicyError, PolicyInput, PolicyParams,
    RunningMoments,
};
use crate::prompt::PromptState;

/// Floor on the per-episode reward standard deviation.
pub const REWARD_STD_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    /// Position in the candidate list.
    pub index: usize,
    pub log_prob: f64,
    pub value: f64,
}

/// Anything that picks one valid candidate per step.
pub trait EditPolicy: Sync {
    fn decide(&self, input: &PolicyInput, rng: &mut ChaCha8Rng) -> Result<Decision, PolicyError>;
}

/// The attention actor-critic, sampling or acting greedily.
#[derive(Debug, Clone, Copy)]
pub struct AttentionPolicy<'a> {
    pub params: &'a PolicyParams,
    pub greedy: bool,
}

impl EditPolicy for AttentionPolicy<'_> {
    fn decide(&self, input: &PolicyInput, rng: &mut ChaCha8Rng) -> Result<Decision, PolicyError> {
        let out = self.params.forward(input)?;
        let lp = masked_log_softmax(&out.logits);
        let index = if self.greedy {
            greedy_index(&out.logits)
        } else {
            sample_index(&lp, rng)
        };
        Ok(Decision {
            index,
            log_prob: lp[index],
            value: out.value,
        })
    }
}

/// Uniform choice among valid candidates.
#[derive(Debug, Clone, Copy, Default)]
pub struct UniformPolicy;

impl EditPolicy for UniformPolicy {
    fn decide(&self, input: &PolicyInput, rng: &mut ChaCha8Rng) -> Result<Decision, PolicyError> {
        let valid = input.mask.iter().filter(|&&m| m).count();
        if valid == 0 {
            return Err(PolicyError::NoActions);
        }
        let lp: Vec<f64> = input
            .mask
            .iter()
            .map(|&m| if m { -(valid as f64).ln() } else { f64::NEG_INFINITY })
            .collect();
        let index = sample_index(&lp, rng);
        Ok(Decision {
            index,
            log_prob: lp[index],
            value: 0.0,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    /// Input with the observation normalized by the rollout's snapshot.
    pub input: PolicyInput,
    pub raw_observation: Vec<f64>,
    pub action: usize,
    pub action_code: u64,
    pub log_prob: f64,
    pub value: f64,
    /// Reward used for learning (normalized when enabled).
    pub reward: f64,
    /// Score difference before normalization.
    pub raw_reward: f64,
    pub done: bool,
}

/// One labelled episode to roll out.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeSpec {
    pub query: String,
    pub correct: usize,
    /// Seeds the initial exemplar draw.
    pub init_seed: u64,
    /// Seeds action sampling.
    pub policy_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub transitions: Vec<Transition>,
    pub initial_prompt: PromptState,
    pub final_prompt: PromptState,
    pub initial_score: f64,
    pub final_score: f64,
}

#[derive(Debug, Default)]
pub struct RolloutBatch {
    /// Completed episodes, in spec order.
    pub episodes: Vec<EpisodeRecord>,
    /// Spec index and error of every discarded episode.
    pub failures: Vec<(usize, EnvError)>,
}

/// Divides by `max(std, REWARD_STD_FLOOR)` (population std). A constant
/// zero sequence stays zero.
pub fn normalize_rewards(rewards: &[f64]) -> Vec<f64> {
    if rewards.is_empty() {
        return Vec::new();
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let scale = var.sqrt().max(REWARD_STD_FLOOR);
    rewards.iter().map(|r| r / scale).collect()
}

/// Rolls out one labelled episode for the full horizon.
pub fn run_episode(
    env: &Environment<'_>,
    policy: &dyn EditPolicy,
    spec: &EpisodeSpec,
    moments: Option<&RunningMoments>,
) -> Result<EpisodeRecord, EnvError> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.policy_seed);
    let mut episode = env.reset(&spec.query, Some(spec.correct), None, spec.init_seed)?;
    let initial_prompt = episode.prompt.clone();
    let initial_score = episode.score.expect("labelled episode has a score");
    let mut transitions = Vec::with_capacity(env.config().horizon);
    loop {
        let cand = env.candidates(&episode, moments)?;
        let decision = policy.decide(&cand.input, &mut rng)?;
        let action = cand.catalog.get(decision.index).ok_or(PolicyError::NoActions)?;
        let outcome = env.step(&mut episode, action)?;
        let reward = outcome.reward.expect("labelled episode has rewards");
        transitions.push(Transition {
            input: cand.input,
            raw_observation: cand.raw_observation,
            action: decision.index,
            action_code: action.encode(),
            log_prob: decision.log_prob,
            value: decision.value,
            reward,
            raw_reward: reward,
            done: outcome.done,
        });
        if outcome.done {
            break;
        }
    }
    if env.config().reward_normalization {
        let raw: Vec<f64> = transitions.iter().map(|t| t.raw_reward).collect();
        for (t, r) in transitions.iter_mut().zip(normalize_rewards(&raw)) {
            t.reward = r;
        }
    }
    Ok(EpisodeRecord {
        transitions,
        initial_prompt,
        final_score: episode.score.expect("labelled episode has a score"),
        final_prompt: episode.prompt,
        initial_score,
    })
}

/// Runs every spec in parallel. Results keep spec order, so the batch is
/// identical for any thread count. Failed episodes are logged and dropped.
pub fn rollout(
    env: &Environment<'_>,
    policy: &dyn EditPolicy,
    specs: &[EpisodeSpec],
    moments: Option<&RunningMoments>,
) -> RolloutBatch {
    let results: Vec<_> = specs
        .par_iter()
        .map(|spec| run_episode(env, policy, spec, moments))
        .collect();
    let mut batch = RolloutBatch::default();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(ep) => batch.episodes.push(ep),
            Err(e) => {
                log::warn!("discarding episode {i}: {e}");
                batch.failures.push((i, e));
            }
        }
    }
    batch
}

/// Edits an unlabelled query for the full horizon and returns the final
/// episode state.
pub fn edit_query(
    env: &Environment<'_>,
    policy: &dyn EditPolicy,
    query: &str,
    init: Option<PromptState>,
    init_seed: u64,
    policy_seed: u64,
    moments: Option<&RunningMoments>,
) -> Result<EpisodeState, EnvError> {
    let mut rng = ChaCha8Rng::seed_from_u64(policy_seed);
    let mut episode = env.reset(query, None, init, init_seed)?;
    while episode.step < env.config().horizon {
        let cand = env.candidates(&episode, moments)?;
        let decision = policy.decide(&cand.input, &mut rng)?;
        let action = cand.catalog.get(decision.index).ok_or(PolicyError::NoActions)?;
        env.step(&mut episode, action)?;
    }
    Ok(episode)
}
