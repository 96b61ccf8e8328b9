//! PPO on a one-step contextual bandit with a known best arm per context.

use ndarray::Array2;
use promptedit::env::{EpisodeRecord, Transition};
use promptedit::policy::{masked_log_softmax, sample_index, ActionHistory, NetConfig, PolicyInput, PolicyParams};
use promptedit::ppo::{ppo_update, Adam, PpoConfig, RolloutBuffer};
use promptedit::prompt::PromptState;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ARMS: usize = 5;
const CONTEXTS: usize = 3;

fn best_arm(ctx: usize) -> usize {
    (2 * ctx + 1) % ARMS
}

fn input(ctx: usize) -> PolicyInput {
    let mut observation = vec![0.0; CONTEXTS];
    observation[ctx] = 1.0;
    PolicyInput {
        observation,
        candidates: Array2::from_shape_fn((ARMS, ARMS), |(r, c)| if r == c { 1.0 } else { 0.0 }),
        kinds: vec![0; ARMS],
        history: ActionHistory::new(0),
        mask: vec![true; ARMS],
    }
}

fn optimal_rate(params: &PolicyParams) -> f64 {
    (0..CONTEXTS)
        .map(|c| masked_log_softmax(&params.forward(&input(c)).unwrap().logits)[best_arm(c)].exp())
        .sum::<f64>()
        / CONTEXTS as f64
}

fn episode(params: &PolicyParams, rng: &mut ChaCha8Rng) -> EpisodeRecord {
    let ctx = rng.gen_range(0..CONTEXTS);
    let inp = input(ctx);
    let out = params.forward(&inp).unwrap();
    let lp = masked_log_softmax(&out.logits);
    let a = sample_index(&lp, rng);
    let reward = if a == best_arm(ctx) { 1.0 } else { 0.0 };
    let blank = PromptState::new(vec![], vec![], 0, "");
    EpisodeRecord {
        transitions: vec![Transition {
            input: inp,
            raw_observation: vec![],
            action: a,
            action_code: 0,
            log_prob: lp[a],
            value: out.value,
            reward,
            raw_reward: reward,
            done: true,
        }],
        initial_prompt: blank.clone(),
        final_prompt: blank,
        initial_score: 0.0,
        final_score: reward,
    }
}

#[test]
fn bandit_reaches_best_arm() {
    let net = NetConfig {
        obs_dim: CONTEXTS,
        cand_dim: ARMS,
        latent_dim: 16,
        heads: 2,
        layers: 1,
        ffn_dim: 32,
        history_capacity: 0,
    };
    let config = PpoConfig {
        learning_rate: 1e-3,
        epochs_per_update: 1,
        ..PpoConfig::default()
    };
    let mut params = PolicyParams::init(net, 3).unwrap();
    let mut adam = Adam::new(&params, config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut reached = None;
    for update in 1..=2000 {
        let eps: Vec<_> = (0..config.minibatch_size).map(|_| episode(&params, &mut rng)).collect();
        let mut buf = RolloutBuffer::from_episodes(&eps, config.gamma, config.gae_lambda).unwrap();
        ppo_update(&mut buf, &mut params, &mut adam, &config, &mut rng).unwrap();
        if update % 25 == 0 {
            let rate = optimal_rate(&params);
            println!("update {update}: {rate:.4}");
            if rate >= 0.95 {
                reached = Some(update);
                break;
            }
        }
    }
    assert!(reached.is_some());
}
