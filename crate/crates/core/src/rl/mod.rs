//! Reward granularities derived from the teacher pair, the sequence-level
//! Bradley–Terry reward model, PPO-based distillation (DPPO), and the
//! sample-complexity probes.

mod ppo;
mod probe;
mod reward_model;

pub use ppo::{
    dppo_train, ppo_surrogate_loss, vanilla_policy_gradient, CriticTable, DppoTeachers, PpoConfig,
    PpoSample,
};
pub use probe::{best_action_oracle, sample_complexity_probe, ProbeOracles, ProbeResult};
pub use reward_model::{bt_rm_fit, FeatureMap, RewardModelFit, SequenceRewardModel};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{prefix_states, State, Token};
use crate::policy::TabularPolicy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GranularityKind {
    DistributionLevel,
    TokenLevel,
    SequenceLevel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardGranularity {
    pub kind: GranularityKind,
    pub beta: f64,
}

/// `β · log(π_dpo(a|s) / π_ref(a|s))`.
pub fn token_reward(
    dpo: &TabularPolicy,
    reference: &TabularPolicy,
    state: &State,
    action: Token,
    beta: f64,
) -> f64 {
    beta * (dpo.log_prob(state, action) - reference.log_prob(state, action))
}

/// `β · log(π_dpo(y|x) / π_ref(y|x))`.
pub fn sequence_reward(
    dpo: &TabularPolicy,
    reference: &TabularPolicy,
    x: &[Token],
    y: &[Token],
    beta: f64,
) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::precondition("sequence reward of an empty response"));
    }
    Ok(beta * (dpo.response_logprob(x, y) - reference.response_logprob(x, y)))
}

/// Per-position rewards for PPO with the KL penalty against `student_ref`
/// at every position.
///
/// Token level: every position carries its token reward. Sequence level: the
/// sequence reward sits on the final position (the EOS token, or the last
/// token when the horizon cut the response).
#[allow(clippy::too_many_arguments)]
pub fn kl_penalized_reward(
    granularity: RewardGranularity,
    student: &TabularPolicy,
    student_ref: &TabularPolicy,
    dpo: &TabularPolicy,
    reference: &TabularPolicy,
    x: &[Token],
    y: &[Token],
) -> Result<Vec<f64>> {
    if y.is_empty() {
        return Err(Error::precondition("reward of an empty response"));
    }
    let beta = granularity.beta;
    let mut out: Vec<f64> = prefix_states(x, y)
        .zip(y)
        .map(|(s, &a)| -beta * (student.log_prob(&s, a) - student_ref.log_prob(&s, a)))
        .collect();
    match granularity.kind {
        GranularityKind::TokenLevel => {
            for ((s, &a), r) in prefix_states(x, y).zip(y).zip(out.iter_mut()) {
                *r += token_reward(dpo, reference, &s, a, beta);
            }
        }
        GranularityKind::SequenceLevel => {
            let last = out.len() - 1;
            out[last] += sequence_reward(dpo, reference, x, y, beta)?;
        }
        GranularityKind::DistributionLevel => {
            return Err(Error::Granularity(
                "distribution-level signals are consumed by ADPA, not by PPO rewards".into(),
            ));
        }
    }
    Ok(out)
}
