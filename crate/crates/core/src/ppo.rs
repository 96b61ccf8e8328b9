//! Clipped-ratio PPO with generalized advantage estimation.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::EpisodeRecord;
use crate::policy::{entropy, masked_log_softmax, Gradients, PolicyError, PolicyInput, PolicyParams, Tape};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PpoError {
    #[error("shape mismatch: {0}")]
    ShapeError(String),
    #[error("invalid PPO configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss in update (epoch {epoch}, minibatch {minibatch}): {detail}")]
    NonFiniteLoss {
        epoch: usize,
        minibatch: usize,
        detail: String,
    },
    #[error("empty rollout buffer")]
    EmptyBuffer,
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub learning_rate: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub minibatch_size: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_epsilon: f64,
    pub epochs_per_update: usize,
    /// Global gradient-norm limit per minibatch step.
    pub max_grad_norm: f64,
    pub iterations: usize,
    /// Episodes rolled out per iteration.
    pub episodes_per_iteration: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            entropy_coef: 0.005,
            value_coef: 0.5,
            minibatch_size: 32,
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_epsilon: 0.2,
            epochs_per_update: 4,
            max_grad_norm: 0.5,
            iterations: 100,
            episodes_per_iteration: 32,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), PpoError> {
        let bad = |m: &str| Err(PpoError::InvalidConfig(m.into()));
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return bad("clip_epsilon must lie in (0, 1)");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) || !(self.gae_lambda > 0.0 && self.gae_lambda <= 1.0) {
            return bad("gamma and gae_lambda must lie in (0, 1]");
        }
        if !(self.learning_rate > 0.0) || !(self.max_grad_norm > 0.0) {
            return bad("learning_rate and max_grad_norm must be positive");
        }
        if self.entropy_coef < 0.0 || self.value_coef < 0.0 {
            return bad("loss coefficients must be non-negative");
        }
        if self.minibatch_size == 0 || self.epochs_per_update == 0 || self.episodes_per_iteration == 0 {
            return bad("minibatch_size, epochs_per_update and episodes_per_iteration must be positive");
        }
        Ok(())
    }
}

/// Advantages and returns for one trajectory segment. `values` carries one
/// bootstrap entry past the last step.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>), PpoError> {
    let t = rewards.len();
    if values.len() != t + 1 || dones.len() != t {
        return Err(PpoError::ShapeError(format!(
            "{t} rewards, {} values, {} done flags",
            values.len(),
            dones.len()
        )));
    }
    let mut adv = vec![0.0; t];
    let mut next = 0.0;
    for i in (0..t).rev() {
        let live = if dones[i] { 0.0 } else { 1.0 };
        let delta = rewards[i] + gamma * values[i + 1] * live - values[i];
        next = delta + gamma * lambda * live * next;
        adv[i] = next;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BufferedStep {
    pub input: PolicyInput,
    pub action: usize,
    pub old_log_prob: f64,
    pub old_value: f64,
    pub advantage: f64,
    pub return_: f64,
}

/// On-policy store for one update.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RolloutBuffer {
    pub steps: Vec<BufferedStep>,
}

impl RolloutBuffer {
    /// Flattens episodes in order, computing advantages per episode.
    pub fn from_episodes(episodes: &[EpisodeRecord], gamma: f64, lambda: f64) -> Result<Self, PpoError> {
        let mut steps = Vec::new();
        for ep in episodes {
            let rewards: Vec<f64> = ep.transitions.iter().map(|t| t.reward).collect();
            let dones: Vec<bool> = ep.transitions.iter().map(|t| t.done).collect();
            let mut values: Vec<f64> = ep.transitions.iter().map(|t| t.value).collect();
            values.push(0.0);
            let (adv, ret) = compute_gae(&rewards, &values, &dones, gamma, lambda)?;
            for ((t, a), r) in ep.transitions.iter().zip(adv).zip(ret) {
                steps.push(BufferedStep {
                    input: t.input.clone(),
                    action: t.action,
                    old_log_prob: t.log_prob,
                    old_value: t.value,
                    advantage: a,
                    return_: r,
                });
            }
        }
        Ok(Self { steps })
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Shifts and scales advantages to mean 0 and (population) std 1. A
    /// constant batch is only centred.
    pub fn normalize_advantages(&mut self) {
        let n = self.steps.len() as f64;
        if self.steps.is_empty() {
            return;
        }
        let mean = self.steps.iter().map(|s| s.advantage).sum::<f64>() / n;
        let var = self.steps.iter().map(|s| (s.advantage - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        for s in &mut self.steps {
            s.advantage -= mean;
            if std > 1e-12 {
                s.advantage /= std;
            }
        }
    }

    pub fn clear(&mut self) {
        self.steps.clear();
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Gradients,
    v: Gradients,
}

impl Adam {
    pub fn new(params: &PolicyParams, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.zero_gradients(),
            v: params.zero_gradients(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn apply(&mut self, params: &mut PolicyParams, grads: &Gradients) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.eps);
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(&grads.tensors)
            .zip(&mut self.m.tensors)
            .zip(&mut self.v.tensors)
        {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub grad_norm: f64,
    pub minibatches: usize,
}

/// Loss pieces for one sample and the upstream gradients that produce them.
struct SampleLoss {
    policy: f64,
    value: f64,
    entropy: f64,
    clipped: bool,
    kl: f64,
    grads: Gradients,
}

/// Clipped surrogate for one ratio. Returns the loss and whether the clip
/// is active (zero gradient through the ratio).
pub fn clipped_surrogate(ratio: f64, advantage: f64, epsilon: f64) -> (f64, bool) {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon) * advantage;
    if clipped < unclipped {
        (-clipped, true)
    } else {
        (-unclipped, false)
    }
}

fn sample_loss(
    params: &PolicyParams,
    step: &BufferedStep,
    config: &PpoConfig,
    scale: f64,
) -> Result<SampleLoss, PpoError> {
    let mut tape = Tape::new();
    let out = params.forward_recorded(&step.input, &mut tape)?;
    let lp = masked_log_softmax(&out.logits);
    let a = step.action;
    if a >= lp.len() || !lp[a].is_finite() {
        return Err(PpoError::ShapeError(format!("stored action {a} is not selectable")));
    }
    let log_ratio = lp[a] - step.old_log_prob;
    let ratio = log_ratio.exp();
    let (policy, clipped) = clipped_surrogate(ratio, step.advantage, config.clip_epsilon);
    let h = entropy(&lp);
    let value = (out.value - step.return_).powi(2);

    // d loss / d log pi(a)
    let g_a = if clipped { 0.0 } else { -step.advantage * ratio };
    let d_logits: Vec<f64> = lp
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            if !l.is_finite() {
                return 0.0;
            }
            let p = l.exp();
            let from_policy = g_a * (if i == a { 1.0 } else { 0.0 } - p);
            let from_entropy = config.entropy_coef * p * (l + h);
            scale * (from_policy + from_entropy)
        })
        .collect();
    let d_value = scale * 2.0 * config.value_coef * (out.value - step.return_);
    let grads = params.backward(&tape, &d_logits, d_value)?;
    Ok(SampleLoss {
        policy,
        value,
        entropy: h,
        clipped: (ratio - 1.0).abs() > config.clip_epsilon,
        kl: (ratio - 1.0) - log_ratio,
        grads,
    })
}

/// Runs `epochs_per_update` passes of shuffled minibatch steps over the
/// buffer, normalizing advantages first. On a non-finite loss or gradient
/// the parameters are restored to their state before the update.
pub fn ppo_update<R: Rng + ?Sized>(
    buffer: &mut RolloutBuffer,
    params: &mut PolicyParams,
    optimizer: &mut Adam,
    config: &PpoConfig,
    rng: &mut R,
) -> Result<UpdateStats, PpoError> {
    config.validate()?;
    if buffer.is_empty() {
        return Err(PpoError::EmptyBuffer);
    }
    buffer.normalize_advantages();
    let snapshot = (params.clone(), optimizer.clone());
    let mut stats = UpdateStats::default();
    let mut order: Vec<usize> = (0..buffer.len()).collect();
    let mut samples = 0usize;
    for epoch in 0..config.epochs_per_update {
        order.shuffle(rng);
        for (mb, chunk) in order.chunks(config.minibatch_size).enumerate() {
            let scale = 1.0 / chunk.len() as f64;
            let current: &PolicyParams = params;
            let losses: Vec<SampleLoss> = chunk
                .par_iter()
                .map(|&i| sample_loss(current, &buffer.steps[i], config, scale))
                .collect::<Result<_, _>>()?;
            let mut grads = params.zero_gradients();
            let (mut pl, mut vl, mut ent) = (0.0, 0.0, 0.0);
            for s in &losses {
                grads.add_assign(&s.grads);
                pl += s.policy;
                vl += s.value;
                ent += s.entropy;
                stats.clip_fraction += if s.clipped { 1.0 } else { 0.0 };
                stats.approx_kl += s.kl;
            }
            let total = (pl + config.value_coef * vl - config.entropy_coef * ent) * scale;
            let norm = grads.l2_norm();
            if !total.is_finite() || !norm.is_finite() {
                *params = snapshot.0;
                *optimizer = snapshot.1;
                return Err(PpoError::NonFiniteLoss {
                    epoch,
                    minibatch: mb,
                    detail: format!("policy {pl}, value {vl}, entropy {ent}, grad norm {norm}"),
                });
            }
            if norm > config.max_grad_norm {
                grads.scale(config.max_grad_norm / norm);
            }
            optimizer.apply(params, &grads);
            stats.policy_loss += pl;
            stats.value_loss += vl;
            stats.entropy += ent;
            stats.grad_norm += norm;
            stats.minibatches += 1;
            samples += chunk.len();
        }
    }
    if !params.is_finite() {
        *params = snapshot.0;
        *optimizer = snapshot.1;
        return Err(PpoError::NonFiniteLoss {
            epoch: config.epochs_per_update,
            minibatch: 0,
            detail: "parameters became non-finite".into(),
        });
    }
    let n = samples as f64;
    stats.policy_loss /= n;
    stats.value_loss /= n;
    stats.entropy /= n;
    stats.clip_fraction /= n;
    stats.approx_kl /= n;
    stats.grad_norm /= stats.minibatches as f64;
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gae_hand_cases() {
        let (a, r) = compute_gae(&[1.0], &[0.5, 0.0], &[true], 0.99, 0.95).unwrap();
        assert_eq!(a, vec![0.5]);
        assert_eq!(r, vec![1.0]);
        let (a, _) = compute_gae(&[0.0, 1.0], &[0.5, 0.5, 0.0], &[false, true], 0.99, 0.95).unwrap();
        assert!((a[0] - 0.46525).abs() < 1e-12 && (a[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn gae_lambda_zero_is_td_error() {
        let r = [0.3, -0.2, 1.0];
        let v = [0.1, 0.4, -0.3, 0.0];
        let d = [false, false, true];
        let (a, _) = compute_gae(&r, &v, &d, 0.9, 0.0).unwrap();
        for t in 0..3 {
            let live = if d[t] { 0.0 } else { 1.0 };
            let delta = r[t] + 0.9 * v[t + 1] * live - v[t];
            assert!((a[t] - delta).abs() < 1e-12);
        }
    }

    #[test]
    fn gae_shape_errors() {
        assert!(matches!(
            compute_gae(&[1.0, 2.0], &[0.0, 0.0], &[false, true], 0.9, 0.9),
            Err(PpoError::ShapeError(_))
        ));
        assert!(compute_gae(&[1.0], &[0.0, 0.0], &[], 0.9, 0.9).is_err());
    }

    #[test]
    fn clip_arithmetic() {
        assert_eq!(clipped_surrogate(1.5, 1.0, 0.2), (-1.2, true));
        assert_eq!(clipped_surrogate(1.0, 1.0, 0.2), (-1.0, false));
        assert_eq!(clipped_surrogate(0.5, -1.0, 0.2), (0.8, true));
        assert_eq!(clipped_surrogate(1.5, -1.0, 0.2), (1.5, false));
    }

    #[test]
    fn config_validation() {
        assert!(PpoConfig::default().validate().is_ok());
        let c = PpoConfig { clip_epsilon: 1.0, ..PpoConfig::default() };
        assert!(c.validate().is_err());
        let c = PpoConfig { gamma: 0.0, ..PpoConfig::default() };
        assert!(c.validate().is_err());
    }
}
