//! The editing MDP: reset to an initial prompt for a query, apply one edit
//! per step, reward the change in score, stop after a fixed horizon.

mod features;
mod rollout;

pub use features::CandidateLayout;
pub use rollout::{
    edit_query, normalize_rewards, rollout, run_episode, AttentionPolicy, Decision, EditPolicy, EpisodeRecord,
    EpisodeSpec, RolloutBatch, Transition, UniformPolicy, REWARD_STD_FLOOR,
};

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::edit::{ActionCatalog, EditAction, EditError, EditSpace, FamilyToggles};
use crate::policy::{ActionHistory, HistoryEntry, PolicyError, PolicyInput, RunningMoments};
use crate::prompt::{lexical_tokens, render, tokenize_instruction, ExemplarPool, PromptError, PromptState, TaskSpec};
use crate::scoring::{compute_s, ScoreRequest, ScoreWeights, Scorer, ScorerObservation, ScoringError};

/// Independent seed for item `index` of stream `stream` under `base`
/// (splitmix64 finalizer over the combined words).
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    for _ in 0..2 {
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("invalid environment configuration: {0}")]
    InvalidConfig(String),
    #[error("episode already finished after {0} steps")]
    EpisodeFinished(usize),
    #[error(transparent)]
    Edit(#[from] EditError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub horizon: usize,
    pub n_exemplars: usize,
    pub pool_size: usize,
    pub weights: ScoreWeights,
    /// Divide each episode's rewards by their standard deviation.
    pub reward_normalization: bool,
    pub toggles: FamilyToggles,
    /// Index into the task's instruction pool; `None` starts with no
    /// instruction.
    pub instruction_index: Option<usize>,
    pub initial_verbalizer: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            horizon: 8,
            n_exemplars: 4,
            pool_size: 16,
            weights: ScoreWeights::default(),
            reward_normalization: true,
            toggles: FamilyToggles::default(),
            instruction_index: Some(0),
            initial_verbalizer: 0,
        }
    }
}

/// One query's episode in progress.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeState {
    pub prompt: PromptState,
    pub observation: ScorerObservation,
    /// `None` when no label is known (test time).
    pub correct: Option<usize>,
    pub score: Option<f64>,
    pub step: usize,
    pub history: ActionHistory,
    query_tokens: BTreeSet<String>,
}

impl EpisodeState {
    /// Scorer features followed by label log-probabilities.
    pub fn raw_observation(&self) -> Vec<f64> {
        let mut v = self.observation.features.clone();
        v.extend_from_slice(&self.observation.label_log_probs);
        v
    }
}

/// Result of a single edit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub action: EditAction,
    /// Score difference; `None` without a label.
    pub reward: Option<f64>,
    pub done: bool,
}

/// Decision inputs for the current state, plus the catalog they index.
#[derive(Debug, Clone)]
pub struct Candidates {
    pub catalog: ActionCatalog,
    pub input: PolicyInput,
    pub raw_observation: Vec<f64>,
}

pub struct Environment<'a> {
    config: EnvConfig,
    task: &'a TaskSpec,
    pool: &'a ExemplarPool,
    scorer: &'a dyn Scorer,
    space: EditSpace,
    layout: CandidateLayout,
    instruction: Vec<String>,
    history_capacity: usize,
}

impl<'a> Environment<'a> {
    pub fn new(
        config: EnvConfig,
        task: &'a TaskSpec,
        pool: &'a ExemplarPool,
        scorer: &'a dyn Scorer,
    ) -> Result<Self, EnvError> {
        let bad = |m: String| Err(EnvError::InvalidConfig(m));
        if config.horizon == 0 {
            return bad("horizon must be at least 1".into());
        }
        if pool.len() != config.pool_size {
            return bad(format!("pool has {} exemplars, config says {}", pool.len(), config.pool_size));
        }
        if config.n_exemplars > pool.len() {
            return bad(format!(
                "{} exemplar slots exceed pool of {}",
                config.n_exemplars,
                pool.len()
            ));
        }
        if let Some(e) = pool.iter().find(|e| e.label >= task.num_labels()) {
            return bad(format!("exemplar {} has label {} outside the label space", e.id, e.label));
        }
        if config.initial_verbalizer >= task.num_verbalizers() {
            return bad(format!("initial verbalizer {} outside pool", config.initial_verbalizer));
        }
        if !config.toggles.any() {
            return bad("every edit family is disabled".into());
        }
        config.weights.validate()?;
        let instruction = match config.instruction_index {
            None => Vec::new(),
            Some(i) => match task.instruction_pool.get(i) {
                Some(raw) => tokenize_instruction(raw)?,
                None => return bad(format!("instruction index {i} outside pool")),
            },
        };
        Ok(Self {
            space: EditSpace::new(pool.len(), task.num_verbalizers(), config.toggles),
            layout: CandidateLayout::for_task(task),
            history_capacity: config.horizon,
            config,
            task,
            pool,
            scorer,
            instruction,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn task(&self) -> &TaskSpec {
        self.task
    }

    pub fn pool(&self) -> &ExemplarPool {
        self.pool
    }

    pub fn space(&self) -> &EditSpace {
        &self.space
    }

    pub fn observation_dim(&self) -> usize {
        self.scorer.feature_dim() + self.task.num_labels()
    }

    pub fn candidate_dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn history_capacity(&self) -> usize {
        self.history_capacity
    }

    /// Scores a prompt without touching any episode.
    pub fn observe(&self, prompt: &PromptState) -> Result<ScorerObservation, EnvError> {
        let rendered = render(prompt, self.task, self.pool)?;
        let obs = self.scorer.score(&ScoreRequest {
            state: prompt,
            task: self.task,
            pool: self.pool,
            rendered: &rendered,
        })?;
        obs.check(self.task.num_labels(), self.scorer.feature_dim())?;
        Ok(obs)
    }

    /// Initial prompt for `query`: the configured instruction, `n` exemplars
    /// drawn without replacement with `seed`, one verbalizer everywhere.
    pub fn initial_prompt(&self, query: &str, seed: u64) -> PromptState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let slots = rand::seq::index::sample(&mut rng, self.pool.len(), self.config.n_exemplars).into_vec();
        PromptState::new(self.instruction.clone(), slots, self.config.initial_verbalizer, query)
    }

    pub fn reset(
        &self,
        query: &str,
        correct: Option<usize>,
        init: Option<PromptState>,
        seed: u64,
    ) -> Result<EpisodeState, EnvError> {
        let prompt = match init {
            Some(p) => {
                p.validate(self.task, self.pool, Some(0))?;
                if p.num_slots() != self.config.n_exemplars {
                    return Err(EnvError::InvalidConfig(format!(
                        "initial prompt has {} slots, config says {}",
                        p.num_slots(),
                        self.config.n_exemplars
                    )));
                }
                if p.query != query {
                    return Err(EnvError::InvalidConfig("initial prompt is for another query".into()));
                }
                p
            }
            None => self.initial_prompt(query, seed),
        };
        if let Some(c) = correct {
            if c >= self.task.num_labels() {
                return Err(EnvError::InvalidConfig(format!("label {c} outside the label space")));
            }
        }
        let observation = self.observe(&prompt)?;
        let score = correct
            .map(|c| compute_s(&observation, c, self.config.weights))
            .transpose()?;
        Ok(EpisodeState {
            query_tokens: lexical_tokens(&prompt.query),
            prompt,
            observation,
            correct,
            score,
            step: 0,
            history: ActionHistory::new(self.history_capacity),
        })
    }

    /// Catalog and network input for the episode's current state.
    /// `moments` normalizes the observation; it is never updated here.
    pub fn candidates(
        &self,
        episode: &EpisodeState,
        moments: Option<&RunningMoments>,
    ) -> Result<Candidates, EnvError> {
        let catalog = self.space.catalog(&episode.prompt);
        if catalog.is_empty() {
            return Err(PolicyError::NoActions.into());
        }
        let dim = self.layout.dim();
        let mut rows = Array2::zeros((catalog.len(), dim));
        for (r, action) in catalog.actions().iter().enumerate() {
            let f = self
                .layout
                .describe(&episode.prompt, action, self.pool, &episode.query_tokens);
            rows.row_mut(r).assign(&ndarray::ArrayView1::from(&f));
        }
        let raw = episode.raw_observation();
        let observation = match moments {
            Some(m) => m.normalized(&raw)?,
            None => raw.clone(),
        };
        let kinds = catalog.actions().iter().map(|a| a.kind() as usize).collect();
        let mask = vec![true; catalog.len()];
        Ok(Candidates {
            input: PolicyInput {
                observation,
                candidates: rows,
                kinds,
                history: episode.history.clone(),
                mask,
            },
            catalog,
            raw_observation: raw,
        })
    }

    /// Applies `action`. The episode is only modified if the edit and the
    /// rescoring both succeed.
    pub fn step(&self, episode: &mut EpisodeState, action: EditAction) -> Result<StepOutcome, EnvError> {
        if episode.step >= self.config.horizon {
            return Err(EnvError::EpisodeFinished(episode.step));
        }
        let features = self
            .layout
            .describe(&episode.prompt, &action, self.pool, &episode.query_tokens);
        let next = self.space.apply(&episode.prompt, action)?;
        let observation = self.observe(&next)?;
        let score = episode
            .correct
            .map(|c| compute_s(&observation, c, self.config.weights))
            .transpose()?;
        let reward = match (score, episode.score) {
            (Some(new), Some(old)) => Some(new - old),
            _ => None,
        };
        episode.prompt = next;
        episode.observation = observation;
        episode.score = score;
        episode.step += 1;
        episode.history.push(HistoryEntry {
            kind: action.kind() as usize,
            features,
        });
        Ok(StepOutcome {
            action,
            reward,
            done: episode.step == self.config.horizon,
        })
    }

    /// Applies the `index`-th entry of the current catalog.
    pub fn step_index(&self, episode: &mut EpisodeState, index: usize) -> Result<StepOutcome, EnvError> {
        let catalog = self.space.catalog(&episode.prompt);
        let action = catalog.get(index).ok_or_else(|| {
            EnvError::InvalidConfig(format!("action index {index} outside catalog of {}", catalog.len()))
        })?;
        self.step(episode, action)
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;
    use std::sync::atomic::{AtomicUsize, Ordering};

    use super::*;
    use crate::prompt::{Exemplar, VerbalizerTemplate};
    use crate::scoring::{SyntheticParams, SyntheticScorer};

    fn task() -> TaskSpec {
        let verbalizers = (0..3)
            .map(|id| {
                let words: BTreeMap<String, String> =
                    [("neg", format!("bad{id}")), ("pos", format!("good{id}"))].into_iter().map(|(k, v)| (k.to_string(), v)).collect();
                VerbalizerTemplate::new(id, "Review: {{text}} It was {{answer_choices[label]}}", words).unwrap()
            })
            .collect();
        TaskSpec::new(
            "toy",
            vec!["neg".into(), "pos".into()],
            verbalizers,
            vec!["Read the review, decide the sentiment, answer.".into()],
            256,
        )
        .unwrap()
    }

    fn pool() -> ExemplarPool {
        let texts = [
            ("dull slow plot", 0),
            ("awful dull acting", 0),
            ("slow boring mess", 0),
            ("bright warm story", 1),
            ("warm funny cast", 1),
            ("funny bright fun", 1),
        ];
        ExemplarPool::new(
            texts
                .iter()
                .map(|&(t, l)| Exemplar { id: 0, text: t.into(), label: l })
                .collect(),
        )
    }

    fn scorer(task: &TaskSpec) -> SyntheticScorer {
        let params = SyntheticParams {
            preferred_verbalizer: vec![1, 2],
            ..SyntheticParams::default()
        };
        SyntheticScorer::new(params, task).unwrap()
    }

    fn config() -> EnvConfig {
        EnvConfig {
            horizon: 3,
            n_exemplars: 2,
            pool_size: 6,
            reward_normalization: false,
            ..EnvConfig::default()
        }
    }

    #[test]
    fn identity_swap_has_zero_reward() {
        let (task, pool) = (task(), pool());
        let scorer = scorer(&task);
        let env = Environment::new(config(), &task, &pool, &scorer).unwrap();
        let mut ep = env.reset("dull slow film", Some(0), None, 7).unwrap();
        let slot0 = ep.prompt.exemplar_slots[0];
        let out = env
            .step(&mut ep, EditAction::ExemplarSwap { slot: 0, pool_id: slot0 })
            .unwrap();
        assert_eq!(out.reward, Some(0.0));
        assert_eq!(ep.step, 1);
        assert_eq!(ep.history.len(), 1);
    }

    #[test]
    fn finishes_exactly_at_horizon() {
        let (task, pool) = (task(), pool());
        let scorer = scorer(&task);
        let env = Environment::new(config(), &task, &pool, &scorer).unwrap();
        let mut ep = env.reset("warm film", Some(1), None, 1).unwrap();
        let dones: Vec<bool> = (0..3).map(|_| env.step_index(&mut ep, 0).unwrap().done).collect();
        assert_eq!(dones, vec![false, false, true]);
        assert!(matches!(env.step_index(&mut ep, 0), Err(EnvError::EpisodeFinished(3))));
    }

    #[test]
    fn rewards_telescope_and_rollouts_are_deterministic() {
        let (task, pool) = (task(), pool());
        let scorer = scorer(&task);
        let env = Environment::new(config(), &task, &pool, &scorer).unwrap();
        let specs: Vec<EpisodeSpec> = (0..40)
            .map(|i| EpisodeSpec {
                query: ["dull slow film", "warm bright fun", "funny plot"][i % 3].into(),
                correct: i % 2,
                init_seed: i as u64,
                policy_seed: 1000 + i as u64,
            })
            .collect();
        let a = rollout(&env, &UniformPolicy, &specs, None);
        let b = rollout(&env, &UniformPolicy, &specs, None);
        assert!(a.failures.is_empty());
        assert_eq!(a.episodes, b.episodes);
        for ep in &a.episodes {
            assert_eq!(ep.transitions.len(), 3);
            let total: f64 = ep.transitions.iter().map(|t| t.raw_reward).sum();
            assert!((total - (ep.final_score - ep.initial_score)).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_rewards_stay_zero_after_normalization() {
        assert_eq!(normalize_rewards(&[0.0, 0.0, 0.0]), vec![0.0, 0.0, 0.0]);
        let r = normalize_rewards(&[1.0, -1.0]);
        assert!((r[0] - 1.0).abs() < 1e-12 && (r[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_configs() {
        let (task, pool) = (task(), pool());
        let scorer = scorer(&task);
        let mut c = config();
        c.n_exemplars = 7;
        assert!(matches!(Environment::new(c, &task, &pool, &scorer), Err(EnvError::InvalidConfig(_))));
        let mut c = config();
        c.toggles = FamilyToggles { instruction: false, exemplar: false, verbalizer: false };
        assert!(Environment::new(c, &task, &pool, &scorer).is_err());
        let mut c = config();
        c.horizon = 0;
        assert!(Environment::new(c, &task, &pool, &scorer).is_err());
    }

    struct Flaky {
        inner: SyntheticScorer,
        calls: AtomicUsize,
        fail_at: usize,
    }

    impl Scorer for Flaky {
        fn score(&self, r: &ScoreRequest<'_>) -> Result<ScorerObservation, ScoringError> {
            if self.calls.fetch_add(1, Ordering::SeqCst) == self.fail_at {
                return Err(ScoringError::ScorerUnavailable { attempts: 1, message: "down".into() });
            }
            self.inner.score(r)
        }

        fn feature_dim(&self) -> usize {
            self.inner.feature_dim()
        }
    }

    #[test]
    fn failed_step_leaves_episode_intact_and_rollout_discards() {
        let (task, pool) = (task(), pool());
        let flaky = Flaky { inner: scorer(&task), calls: AtomicUsize::new(0), fail_at: 1 };
        let env = Environment::new(config(), &task, &pool, &flaky).unwrap();
        let mut ep = env.reset("dull", Some(0), None, 3).unwrap();
        let before = ep.clone();
        assert!(matches!(env.step_index(&mut ep, 0), Err(EnvError::Scoring(_))));
        assert_eq!(ep, before);

        let flaky = Flaky { inner: scorer(&task), calls: AtomicUsize::new(0), fail_at: 2 };
        let env = Environment::new(config(), &task, &pool, &flaky).unwrap();
        let spec = EpisodeSpec { query: "dull".into(), correct: 0, init_seed: 0, policy_seed: 0 };
        let batch = rollout(&env, &UniformPolicy, &[spec.clone(), spec], None);
        assert_eq!(batch.episodes.len(), 1);
        assert_eq!(batch.failures.len(), 1);
    }

    #[test]
    fn unlabelled_editing_runs_without_rewards() {
        let (task, pool) = (task(), pool());
        let scorer = scorer(&task);
        let env = Environment::new(config(), &task, &pool, &scorer).unwrap();
        let ep = edit_query(&env, &UniformPolicy, "warm fun", None, 0, 0, None).unwrap();
        assert_eq!(ep.step, 3);
        assert_eq!(ep.score, None);
        assert_eq!(ep.prompt.history.len(), 3);
    }
}
