//! The outer training loop: sample a batch of labelled queries, roll out
//! the current policy, update with PPO, periodically evaluate on the dev
//! split and keep the best checkpoint.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::env::{derive_seed, rollout, AttentionPolicy, EnvError, Environment, EpisodeSpec};
use crate::harness::{predict, score_predictions, DatasetSplit, HarnessError};
use crate::policy::{NetConfig, PolicyParams, RunningMoments};
use crate::ppo::{ppo_update, Adam, PpoConfig, PpoError, RolloutBuffer, UpdateStats};

const WARMUP_STREAM: u64 = 10;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("scorer permanently unavailable at iteration {iteration}: {message}")]
    ScorerUnavailable {
        iteration: usize,
        message: String,
        /// Parameters and moments at the time of the failure.
        partial: Box<Checkpoint>,
    },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Ppo(#[from] PpoError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error("writing curves: {0}")]
    Io(#[from] std::io::Error),
}

/// Transformer size; input dimensions come from the environment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetShape {
    pub latent_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_dim: usize,
}

impl Default for NetShape {
    fn default() -> Self {
        Self {
            latent_dim: 48,
            heads: 3,
            layers: 3,
            ffn_dim: 192,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub ppo: PpoConfig,
    pub net: NetShape,
    /// Dev evaluation period in iterations (0 evaluates only before and
    /// after training).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            ppo: PpoConfig::default(),
            net: NetShape::default(),
            eval_every: 10,
        }
    }
}

/// One line of the training curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub iteration: usize,
    pub episodes: usize,
    pub failed_episodes: usize,
    /// Mean `s_T - s_0` over the iteration's episodes.
    pub mean_score_gain: Option<f64>,
    pub mean_final_score: Option<f64>,
    pub dev_accuracy: Option<f64>,
    pub dev_mean_score: Option<f64>,
    pub update: Option<UpdateStats>,
    /// Set when the update was rolled back.
    pub update_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Parameters with the best dev result (accuracy, then mean score).
    pub best: Checkpoint,
    pub best_dev_accuracy: f64,
    pub best_dev_score: f64,
    /// Parameters after the last iteration.
    pub last: Checkpoint,
    pub curves: Vec<CurveRecord>,
}

pub fn net_config(env: &Environment<'_>, shape: NetShape) -> NetConfig {
    NetConfig {
        obs_dim: env.observation_dim(),
        cand_dim: env.candidate_dim(),
        latent_dim: shape.latent_dim,
        heads: shape.heads,
        layers: shape.layers,
        ffn_dim: shape.ffn_dim,
        history_capacity: env.history_capacity(),
    }
}

pub fn checkpoint_meta(env: &Environment<'_>, net: NetConfig, iteration: usize) -> CheckpointMeta {
    CheckpointMeta {
        task: env.task().task_name.clone(),
        net,
        n_exemplars: env.config().n_exemplars,
        pool_size: env.config().pool_size,
        num_verbalizers: env.task().num_verbalizers(),
        num_labels: env.task().num_labels(),
        horizon: env.config().horizon,
        iteration,
    }
}

fn snapshot(env: &Environment<'_>, params: &PolicyParams, moments: &RunningMoments, iteration: usize) -> Checkpoint {
    Checkpoint {
        meta: checkpoint_meta(env, *params.config(), iteration),
        params: params.clone(),
        moments: moments.clone(),
    }
}

fn emit(sink: &mut Option<&mut dyn Write>, record: &CurveRecord) -> Result<(), TrainError> {
    if let Some(w) = sink {
        serde_json::to_writer(&mut **w, record).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
        w.flush()?;
    }
    Ok(())
}

fn is_scorer_failure(e: &EnvError) -> bool {
    matches!(e, EnvError::Scoring(s) if s.is_retryable())
}

/// Trains a fresh policy. Rollouts within an iteration share one parameter
/// and moments snapshot; moments absorb the iteration's observations in
/// episode order only after the rollouts finish. With zero iterations the
/// initialization is returned.
pub fn train(
    env: &Environment<'_>,
    train_split: &DatasetSplit,
    dev_split: &DatasetSplit,
    config: &TrainConfig,
    mut curves_out: Option<&mut dyn Write>,
) -> Result<TrainOutcome, TrainError> {
    config.ppo.validate()?;
    if train_split.is_empty() || dev_split.is_empty() {
        return Err(HarnessError::EmptySplit.into());
    }
    let net = net_config(env, config.net);
    let mut params = PolicyParams::init(net, config.seed).map_err(PpoError::from)?;
    let mut optimizer = Adam::new(&params, config.ppo.learning_rate);
    let mut moments = RunningMoments::new(net.obs_dim);
    for (i, ex) in train_split.records.iter().enumerate() {
        let ep = env.reset(&ex.text, Some(ex.label), None, derive_seed(config.seed, WARMUP_STREAM, i as u64))?;
        moments.update(&ep.raw_observation()).map_err(EnvError::from)?;
    }

    let dev_texts = dev_split.texts();
    let dev_labels = dev_split.labels();
    let evaluate_dev = |params: &PolicyParams, moments: &RunningMoments| -> Result<(f64, f64), TrainError> {
        let policy = AttentionPolicy { params, greedy: true };
        let preds = predict(env, Some(&policy), Some(moments), &dev_texts, config.seed)?;
        let report = score_predictions(preds, &dev_labels, env.config().weights)?;
        Ok((report.accuracy, report.mean_score))
    };
    let abort = |iteration, e: &EnvError, params: &PolicyParams, moments: &RunningMoments| {
        TrainError::ScorerUnavailable {
            iteration,
            message: e.to_string(),
            partial: Box::new(snapshot(env, params, moments, iteration)),
        }
    };

    let (acc0, score0) = match evaluate_dev(&params, &moments) {
        Err(TrainError::Env(e)) | Err(TrainError::Harness(HarnessError::Env(e))) if is_scorer_failure(&e) => {
            return Err(abort(0, &e, &params, &moments))
        }
        r => r?,
    };
    let mut best = (snapshot(env, &params, &moments, 0), acc0, score0);
    let mut curves = vec![CurveRecord {
        iteration: 0,
        episodes: 0,
        failed_episodes: 0,
        mean_score_gain: None,
        mean_final_score: None,
        dev_accuracy: Some(acc0),
        dev_mean_score: Some(score0),
        update: None,
        update_error: None,
    }];
    emit(&mut curves_out, &curves[0])?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for iteration in 1..=config.ppo.iterations {
        let specs: Vec<EpisodeSpec> = (0..config.ppo.episodes_per_iteration)
            .map(|_| {
                let ex = &train_split.records[rng.gen_range(0..train_split.len())];
                EpisodeSpec {
                    query: ex.text.clone(),
                    correct: ex.label,
                    init_seed: rng.gen(),
                    policy_seed: rng.gen(),
                }
            })
            .collect();
        let policy = AttentionPolicy { params: &params, greedy: false };
        let batch = rollout(env, &policy, &specs, Some(&moments));
        if let Some((_, e)) = batch.failures.iter().find(|(_, e)| !is_scorer_failure(e)) {
            return Err(e.clone().into());
        }
        if batch.episodes.is_empty() {
            let (_, e) = &batch.failures[0];
            return Err(abort(iteration, e, &params, &moments));
        }
        for ep in &batch.episodes {
            for t in &ep.transitions {
                moments.update(&t.raw_observation).map_err(EnvError::from)?;
            }
        }
        let n = batch.episodes.len() as f64;
        let mean_gain = batch.episodes.iter().map(|e| e.final_score - e.initial_score).sum::<f64>() / n;
        let mean_final = batch.episodes.iter().map(|e| e.final_score).sum::<f64>() / n;

        let mut buffer = RolloutBuffer::from_episodes(&batch.episodes, config.ppo.gamma, config.ppo.gae_lambda)?;
        let (update, update_error) = match ppo_update(&mut buffer, &mut params, &mut optimizer, &config.ppo, &mut rng) {
            Ok(stats) => (Some(stats), None),
            Err(e @ PpoError::NonFiniteLoss { .. }) => {
                log::warn!("iteration {iteration}: update rolled back: {e}");
                (None, Some(e.to_string()))
            }
            Err(e) => return Err(e.into()),
        };
        buffer.clear();

        let evaluate_now = iteration == config.ppo.iterations
            || (config.eval_every > 0 && iteration % config.eval_every == 0);
        let (dev_accuracy, dev_mean_score) = if evaluate_now {
            let (acc, score) = match evaluate_dev(&params, &moments) {
                Err(TrainError::Env(e)) | Err(TrainError::Harness(HarnessError::Env(e)))
                    if is_scorer_failure(&e) =>
                {
                    return Err(abort(iteration, &e, &params, &moments))
                }
                r => r?,
            };
            if acc > best.1 || (acc == best.1 && score > best.2) {
                best = (snapshot(env, &params, &moments, iteration), acc, score);
            }
            (Some(acc), Some(score))
        } else {
            (None, None)
        };
        let record = CurveRecord {
            iteration,
            episodes: batch.episodes.len(),
            failed_episodes: batch.failures.len(),
            mean_score_gain: Some(mean_gain),
            mean_final_score: Some(mean_final),
            dev_accuracy,
            dev_mean_score,
            update,
            update_error,
        };
        log::info!(
            "iteration {iteration}: gain {mean_gain:.4}, final {mean_final:.4}, dev {:?}",
            record.dev_accuracy
        );
        emit(&mut curves_out, &record)?;
        curves.push(record);
    }
    let last = snapshot(env, &params, &moments, config.ppo.iterations);
    Ok(TrainOutcome {
        best: best.0,
        best_dev_accuracy: best.1,
        best_dev_score: best.2,
        last,
        curves,
    })
}
