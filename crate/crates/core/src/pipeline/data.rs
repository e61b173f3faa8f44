//! Preference and instruction data manufactured from the ground-truth reward.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::sigmoid;
use crate::mdp::{response_reward, GroundTruthReward, Token, TokenMdp};
use crate::policy::TabularPolicy;

/// `(x, y_w, y_l)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceTriple {
    pub prompt: Vec<Token>,
    pub preferred: Vec<Token>,
    pub dispreferred: Vec<Token>,
}

impl PreferenceTriple {
    pub fn new(
        prompt: Vec<Token>,
        preferred: Vec<Token>,
        dispreferred: Vec<Token>,
    ) -> Result<Self> {
        if preferred == dispreferred {
            return Err(Error::precondition(
                "preference pair with identical responses",
            ));
        }
        if preferred.is_empty() || dispreferred.is_empty() {
            return Err(Error::precondition(
                "preference pair with an empty response",
            ));
        }
        Ok(PreferenceTriple {
            prompt,
            preferred,
            dispreferred,
        })
    }
}

/// `(x, y)` demonstration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionPair {
    pub prompt: Vec<Token>,
    pub response: Vec<Token>,
}

/// `(x, y, ŷ)`: ground-truth response `y` (the preferred one) and the response
/// `ŷ` whose states the distillation term visits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OnPolicyItem {
    pub prompt: Vec<Token>,
    pub response: Vec<Token>,
    pub generated: Vec<Token>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PreferenceDataset {
    pub triples: Vec<PreferenceTriple>,
    pub instructions: Vec<InstructionPair>,
}

/// Bradley–Terry label: `true` (first preferred) with probability `σ(R₁ − R₂)`.
pub fn bt_label<R: Rng>(reward_first: f64, reward_second: f64, rng: &mut R) -> bool {
    rng.random::<f64>() < sigmoid(reward_first - reward_second)
}

const MAX_DISTINCT_ATTEMPTS: usize = 1000;

/// Samples `n_pairs` labeled pairs, cycling through the prompts in order.
/// Each pair draws two distinct responses from `sampler` and labels them with
/// [`bt_label`] on their ground-truth returns.
pub fn synth_preference_data<R: Rng>(
    mdp: &TokenMdp,
    reward: &GroundTruthReward,
    sampler: &TabularPolicy,
    n_pairs: usize,
    sample_rng: &mut R,
    label_rng: &mut R,
) -> Result<Vec<PreferenceTriple>> {
    if n_pairs == 0 {
        return Err(Error::config("n_pairs", "must be at least 1"));
    }
    if mdp.prompts.is_empty() {
        return Err(Error::config("prompts", "task has no prompts"));
    }
    let mut out = Vec::with_capacity(n_pairs);
    for i in 0..n_pairs {
        let prompt = &mdp.prompts[i % mdp.prompts.len()];
        let first = sampler.sample_response(mdp, prompt, sample_rng);
        let mut second = None;
        for _ in 0..MAX_DISTINCT_ATTEMPTS {
            let t = sampler.sample_response(mdp, prompt, sample_rng);
            if t.actions != first.actions {
                second = Some(t);
                break;
            }
        }
        let second = second.ok_or_else(|| Error::DegenerateSampler {
            prompt: prompt.clone(),
        })?;
        let r1 = response_reward(reward, prompt, &first.actions)?;
        let r2 = response_reward(reward, prompt, &second.actions)?;
        let (w, l) = if bt_label(r1, r2, label_rng) {
            (first.actions, second.actions)
        } else {
            (second.actions, first.actions)
        };
        out.push(PreferenceTriple::new(prompt.clone(), w, l)?);
    }
    Ok(out)
}

/// The highest-return response per prompt (ties to the lexicographically first).
pub fn instruction_data(
    mdp: &TokenMdp,
    reward: &GroundTruthReward,
) -> Result<Vec<InstructionPair>> {
    let mut out = Vec::with_capacity(mdp.prompts.len());
    for prompt in &mdp.prompts {
        let mut best: Option<(f64, Vec<Token>)> = None;
        for t in mdp.enumerate_trajectories(prompt)? {
            let r = response_reward(reward, prompt, &t.actions)?;
            if best.as_ref().is_none_or(|(b, _)| r > *b) {
                best = Some((r, t.actions));
            }
        }
        let (_, response) = best.expect("at least one trajectory per prompt");
        out.push(InstructionPair {
            prompt: prompt.clone(),
            response,
        });
    }
    Ok(out)
}
