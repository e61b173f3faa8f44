use std::cell::Cell;
use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::math::{argmax, log_sum_exp};
use crate::mdp::{State, Token, TokenMdp};
use crate::objectives::AdvantageView;
use crate::oracle::OptimalSolution;
use crate::policy::TabularPolicy;

use super::{GranularityKind, RewardGranularity};

pub type TokenOracle<'a> = &'a dyn Fn(&State, Token) -> Result<f64>;
pub type SequenceOracle<'a> = &'a dyn Fn(&[Token], &[Token]) -> Result<f64>;

/// What each granularity is allowed to ask.
pub struct ProbeOracles<'a> {
    pub mdp: &'a TokenMdp,
    /// One call returns the whole per-action advantage vector.
    pub distribution: AdvantageView<'a>,
    /// `r(s, a)` for a single action.
    pub token: TokenOracle<'a>,
    /// Return of a complete response `y` to prompt `x`.
    pub sequence: SequenceOracle<'a>,
    /// Behavior prior for aggregating sequence returns into a soft Q-value.
    pub reference: &'a TabularPolicy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProbeResult {
    pub action: Token,
    pub queries: u128,
}

/// Picks the best next action at `state` using only the signal a granularity
/// provides, counting oracle calls.
///
/// Sequence level scores every padded action string of length `T − t`
/// (truncated after EOS) and aggregates with
/// `β·log Σ π_ref(rest | s, a) · exp(R/β)` per first action `a`.
pub fn sample_complexity_probe(
    state: &State,
    granularity: RewardGranularity,
    oracles: &ProbeOracles<'_>,
) -> Result<ProbeResult> {
    let mdp = oracles.mdp;
    if state.terminal {
        return Err(Error::precondition("probe at a terminal state"));
    }
    let vocab = mdp.vocab_size;
    match granularity.kind {
        GranularityKind::DistributionLevel => {
            let row = oracles.distribution.row(state)?;
            Ok(ProbeResult {
                action: row.argmax(),
                queries: 1,
            })
        }
        GranularityKind::TokenLevel => {
            let mut values = Vec::with_capacity(vocab);
            for a in 0..vocab {
                values.push((oracles.token)(state, a)?);
            }
            Ok(ProbeResult {
                action: argmax(&values),
                queries: vocab as u128,
            })
        }
        GranularityKind::SequenceLevel => {
            let remaining = mdp.horizon - state.depth();
            let needed = (vocab as u128)
                .checked_pow(remaining as u32)
                .unwrap_or(u128::MAX);
            if needed > mdp.enumeration_budget as u128 {
                return Err(Error::BudgetExceeded {
                    needed,
                    budget: mdp.enumeration_budget as u128,
                });
            }
            let calls = Cell::new(0u128);
            let beta = granularity.beta;
            let mut seen = BTreeSet::new();
            let mut per_action: Vec<Vec<f64>> = vec![Vec::new(); vocab];
            let mut padded = vec![0usize; remaining];
            for _ in 0..needed {
                let cut = padded
                    .iter()
                    .position(|&a| a == mdp.eos_id)
                    .map_or(padded.len(), |i| i + 1);
                let cont = &padded[..cut];
                let mut y = state.generated.clone();
                y.extend_from_slice(cont);
                calls.set(calls.get() + 1);
                let r = (oracles.sequence)(&state.prompt, &y)?;
                if seen.insert(cont.to_vec()) {
                    // prior over the actions after the first one
                    let log_prior = oracles.reference.response_logprob_from(state, cont)
                        - oracles.reference.log_prob(state, cont[0]);
                    per_action[cont[0]].push(log_prior + r / beta);
                }
                // odometer increment, last position fastest
                for i in (0..remaining).rev() {
                    padded[i] += 1;
                    if padded[i] < vocab {
                        break;
                    }
                    padded[i] = 0;
                }
            }
            let q: Vec<f64> = per_action.iter().map(|v| beta * log_sum_exp(v)).collect();
            Ok(ProbeResult {
                action: argmax(&q),
                queries: calls.get(),
            })
        }
    }
}

/// The optimal next action from backward induction (ties to the lower index).
pub fn best_action_oracle(solution: &OptimalSolution, state: &State) -> Option<Token> {
    solution.q_row(state).map(argmax)
}
