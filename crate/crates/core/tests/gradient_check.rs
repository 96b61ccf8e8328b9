//! Central finite differences against the analytic backward pass.

use ndarray::Array2;
use promptedit::edit::NUM_ACTION_KINDS;
use promptedit::policy::{
    masked_log_softmax, ActionHistory, HistoryEntry, NetConfig, PolicyInput, PolicyParams, Tape,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-4;
const TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely.
const SCALE_FLOOR: f64 = 1e-6;

fn tiny() -> NetConfig {
    NetConfig {
        obs_dim: 5,
        cand_dim: 6,
        latent_dim: 8,
        heads: 2,
        layers: 3,
        ffn_dim: 16,
        history_capacity: 3,
    }
}

fn random_input(rng: &mut ChaCha8Rng, c: &NetConfig) -> PolicyInput {
    let k = 5;
    let mut history = ActionHistory::new(c.history_capacity);
    for i in 0..2 {
        history.push(HistoryEntry {
            kind: (i * 3) % NUM_ACTION_KINDS,
            features: (0..c.cand_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        });
    }
    PolicyInput {
        observation: (0..c.obs_dim).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        candidates: Array2::from_shape_fn((k, c.cand_dim), |_| rng.gen_range(-1.0..1.0)),
        kinds: (0..k).map(|i| i % NUM_ACTION_KINDS).collect(),
        history,
        mask: vec![true, true, false, true, true],
    }
}

/// Weighted log-likelihood of the valid actions plus a squared value error.
fn loss(params: &PolicyParams, input: &PolicyInput, weights: &[f64], target: f64) -> f64 {
    let out = params.forward(input).unwrap();
    let lp = masked_log_softmax(&out.logits);
    let policy: f64 = lp
        .iter()
        .zip(weights)
        .filter(|(l, _)| l.is_finite())
        .map(|(l, w)| w * l)
        .sum();
    policy + 0.5 * (out.value - target).powi(2)
}

/// Largest relative error over every scalar parameter.
fn max_relative_error(seed: u64) -> f64 {
    let c = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = PolicyParams::init(c, seed).unwrap();
    // move away from the near-uniform initialization so every path carries signal
    for t in params.tensors_mut() {
        t.mapv_inplace(|v| v + rng.gen_range(-0.3..0.3));
    }
    let input = random_input(&mut rng, &c);
    let weights: Vec<f64> = (0..input.num_candidates()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let target = rng.gen_range(-1.0..1.0);

    let mut tape = Tape::new();
    let out = params.forward_recorded(&input, &mut tape).unwrap();
    let lp = masked_log_softmax(&out.logits);
    let wsum: f64 = weights
        .iter()
        .zip(&lp)
        .filter(|(_, l)| l.is_finite())
        .map(|(w, _)| w)
        .sum();
    let d_logits: Vec<f64> = weights
        .iter()
        .zip(&lp)
        .map(|(w, l)| if l.is_finite() { w - l.exp() * wsum } else { 0.0 })
        .collect();
    let grads = params.backward(&tape, &d_logits, out.value - target).unwrap();

    let mut worst: f64 = 0.0;
    for ti in 0..params.tensors().len() {
        let shape = params.tensors()[ti].dim();
        for r in 0..shape.0 {
            for col in 0..shape.1 {
                let orig = params.tensors()[ti][[r, col]];
                params.tensors_mut()[ti][[r, col]] = orig + STEP;
                let up = loss(&params, &input, &weights, target);
                params.tensors_mut()[ti][[r, col]] = orig - STEP;
                let down = loss(&params, &input, &weights, target);
                params.tensors_mut()[ti][[r, col]] = orig;
                let numeric = (up - down) / (2.0 * STEP);
                let analytic = grads.tensors[ti][[r, col]];
                let scale = numeric.abs().max(analytic.abs()).max(SCALE_FLOOR);
                worst = worst.max((numeric - analytic).abs() / scale);
            }
        }
    }
    worst
}

#[test]
fn analytic_gradients_match_finite_differences() {
    for seed in 0..5 {
        let err = max_relative_error(seed);
        println!("seed {seed}: max relative error {err:.3e}");
        assert!(err <= TOLERANCE, "seed {seed}: {err:.3e}");
    }
}
