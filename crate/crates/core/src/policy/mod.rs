//! Attention actor-critic over the action catalog, observation
//! normalization, and the helpers for turning logits into actions.

mod input;
mod moments;
mod net;

pub use input::{ActionHistory, HistoryEntry, PolicyInput};
pub use moments::{RunningMoments, STD_FLOOR};
pub use net::{ForwardOutput, Gradients, NetConfig, PolicyParams, Tape};

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("shape mismatch: {0}")]
    ShapeError(String),
    #[error("no selectable actions")]
    NoActions,
    #[error("backward called without a recorded forward pass")]
    NoTape,
}

/// Log-softmax over finite logits; `-inf` entries stay `-inf`.
pub fn masked_log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits
        .iter()
        .filter(|z| z.is_finite())
        .map(|z| (z - max).exp())
        .sum();
    let lse = max + sum.ln();
    logits
        .iter()
        .map(|&z| if z.is_finite() { z - lse } else { f64::NEG_INFINITY })
        .collect()
}

/// Entropy of a distribution given as log-probabilities.
pub fn entropy(log_probs: &[f64]) -> f64 {
    -log_probs
        .iter()
        .filter(|lp| lp.is_finite())
        .map(|&lp| lp.exp() * lp)
        .sum::<f64>()
}

/// Draws an index; entries with `-inf` log-probability are never chosen.
pub fn sample_index<R: Rng + ?Sized>(log_probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last_valid = 0;
    for (i, &lp) in log_probs.iter().enumerate() {
        if !lp.is_finite() {
            continue;
        }
        acc += lp.exp();
        last_valid = i;
        if u < acc {
            return i;
        }
    }
    last_valid
}

/// Highest-logit index; ties resolve to the lowest index.
pub fn greedy_index(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &z) in logits.iter().enumerate() {
        if z > logits[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn masked_softmax_and_entropy() {
        let lp = masked_log_softmax(&[0.0, f64::NEG_INFINITY, 0.0]);
        assert_eq!(lp[1], f64::NEG_INFINITY);
        assert!((lp[0] + 2f64.ln()).abs() < 1e-12);
        assert!((entropy(&lp) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn masked_action_never_sampled() {
        let logits = [0.3, f64::NEG_INFINITY, -0.2, 5.0, f64::NEG_INFINITY];
        let lp = masked_log_softmax(&logits);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut counts = [0usize; 5];
        for _ in 0..100_000 {
            counts[sample_index(&lp, &mut rng)] += 1;
        }
        assert_eq!(counts[1], 0);
        assert_eq!(counts[4], 0);
        let p3 = lp[3].exp();
        assert!((counts[3] as f64 / 1e5 - p3).abs() < 0.01);
    }

    #[test]
    fn greedy_picks_first_max() {
        assert_eq!(greedy_index(&[1.0, 3.0, 3.0, f64::NEG_INFINITY]), 1);
        assert_eq!(greedy_index(&[f64::NEG_INFINITY, -1.0]), 1);
    }
}
