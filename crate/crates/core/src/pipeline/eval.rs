//! Scoring policies against the ground-truth reward and held-out preferences.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::mean;
use crate::mdp::{response_reward, GroundTruthReward, State, TokenMdp};
use crate::pipeline::data::PreferenceTriple;
use crate::policy::TabularPolicy;
use crate::seed;

fn expectation(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    mdp: &TokenMdp,
    reward: &GroundTruthReward,
    state: &State,
) -> Result<(f64, f64)> {
    let logp = policy.log_probs(state);
    let logr = reference.log_probs(state);
    let row = reward.row(state)?;
    let mut r_total = 0.0;
    let mut kl_total = 0.0;
    for a in 0..mdp.vocab_size {
        let p = logp[a].exp();
        let next = mdp.transition(state, a)?;
        let (r_next, kl_next) = if next.terminal {
            (0.0, 0.0)
        } else {
            expectation(policy, reference, mdp, reward, &next)?
        };
        r_total += p * (row[a] + r_next);
        kl_total += p * (logp[a] - logr[a] + kl_next);
    }
    Ok((r_total, kl_total))
}

/// Exact expected return of `policy` averaged over the task prompts, together
/// with the expected sequence-level `KL(π ‖ reference)`.
pub fn expected_reward_and_kl(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    mdp: &TokenMdp,
    reward: &GroundTruthReward,
) -> Result<(f64, f64)> {
    if mdp.prompts.is_empty() {
        return Err(Error::precondition("no prompts to evaluate"));
    }
    let mut r = 0.0;
    let mut kl = 0.0;
    for prompt in &mdp.prompts {
        let (pr, pk) = expectation(policy, reference, mdp, reward, &mdp.initial_state(prompt))?;
        r += pr;
        kl += pk;
    }
    let n = mdp.prompts.len() as f64;
    Ok((r / n, kl / n))
}

pub fn expected_true_reward(
    policy: &TabularPolicy,
    mdp: &TokenMdp,
    reward: &GroundTruthReward,
) -> Result<f64> {
    Ok(expected_reward_and_kl(policy, policy, mdp, reward)?.0)
}

/// Fraction of pairs where the mean per-token log-probability of the preferred
/// response beats the dispreferred one. Exact ties count 0.5.
pub fn reward_accuracy(policy: &TabularPolicy, pairs: &[PreferenceTriple]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let score: f64 = pairs
        .iter()
        .map(|t| {
            let w = policy.response_logprob(&t.prompt, &t.preferred) / t.preferred.len() as f64;
            let l =
                policy.response_logprob(&t.prompt, &t.dispreferred) / t.dispreferred.len() as f64;
            if w > l {
                1.0
            } else if w == l {
                0.5
            } else {
                0.0
            }
        })
        .sum();
    score / pairs.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Mean ground-truth return of `n` sampled responses.
    pub sampled_mean_reward: f64,
    /// Exact expectation of the same quantity.
    pub expected_reward: f64,
    pub reward_accuracy: f64,
    pub win_rate: Option<f64>,
}

/// Samples `n` responses per prompt (round-robin over prompts, `n` total) and
/// scores them; with an opponent, both policies answer each prompt and the
/// higher true return wins, ties counting 0.5.
pub fn evaluate(
    policy: &TabularPolicy,
    mdp: &TokenMdp,
    reward: &GroundTruthReward,
    heldout_pairs: &[PreferenceTriple],
    opponent: Option<&TabularPolicy>,
    n: usize,
    eval_seed: u64,
) -> Result<Evaluation> {
    if n == 0 {
        return Err(Error::config("n", "must be at least 1"));
    }
    let mut rng = seed::stream(eval_seed, "eval");
    let mut opp_rng = seed::stream(eval_seed, "eval");
    let mut rewards = Vec::with_capacity(n);
    let mut wins = 0.0;
    for i in 0..n {
        let prompt = &mdp.prompts[i % mdp.prompts.len()];
        let y = policy.sample_response(mdp, prompt, &mut rng);
        let r = response_reward(reward, prompt, &y.actions)?;
        rewards.push(r);
        if let Some(opp) = opponent {
            let z = opp.sample_response(mdp, prompt, &mut opp_rng);
            let ro = response_reward(reward, prompt, &z.actions)?;
            wins += if r > ro {
                1.0
            } else if r == ro {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(Evaluation {
        sampled_mean_reward: mean(&rewards),
        expected_reward: expected_true_reward(policy, mdp, reward)?,
        reward_accuracy: reward_accuracy(policy, heldout_pairs),
        win_rate: opponent.map(|_| wins / n as f64),
    })
}
