//! Finite token-level MDP: states are (prompt, generated-so-far), actions are
//! vocabulary tokens, and the transition appends the chosen token.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Token = usize;

pub const DEFAULT_ENUMERATION_BUDGET: u64 = 1_000_000;

/// A generation state. The prompt and the generated suffix are kept apart so
/// that two prompts never alias each other's continuations.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct State {
    pub prompt: Vec<Token>,
    pub generated: Vec<Token>,
    pub terminal: bool,
}

impl State {
    /// Non-terminal state `(x, y_<t)`.
    pub fn new(prompt: &[Token], generated: &[Token]) -> Self {
        State {
            prompt: prompt.to_vec(),
            generated: generated.to_vec(),
            terminal: false,
        }
    }

    pub fn depth(&self) -> usize {
        self.generated.len()
    }
}

impl fmt::Display for State {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |v: &[Token]| {
            v.iter()
                .map(|t| t.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        };
        write!(f, "[{} | {}]", join(&self.prompt), join(&self.generated))?;
        if self.terminal {
            write!(f, "#")?;
        }
        Ok(())
    }
}

/// A response rolled out from a prompt.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Trajectory {
    pub prompt: Vec<Token>,
    pub actions: Vec<Token>,
    pub terminal: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// `(s_t, a_t)` pairs along the trajectory.
    pub fn steps(&self) -> impl Iterator<Item = (State, Token)> + '_ {
        prefix_states(&self.prompt, &self.actions).zip(self.actions.iter().copied())
    }
}

/// States `(x, y_<t)` for `t = 1..=|y|`.
pub fn prefix_states<'a>(x: &'a [Token], y: &'a [Token]) -> impl Iterator<Item = State> + 'a {
    (0..y.len()).map(move |t| State::new(x, &y[..t]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenMdp {
    pub vocab_size: usize,
    pub eos_id: Token,
    pub horizon: usize,
    pub prompts: Vec<Vec<Token>>,
    #[serde(default = "default_budget")]
    pub enumeration_budget: u64,
}

fn default_budget() -> u64 {
    DEFAULT_ENUMERATION_BUDGET
}

impl TokenMdp {
    pub fn new(
        vocab_size: usize,
        eos_id: Token,
        horizon: usize,
        prompts: Vec<Vec<Token>>,
    ) -> Result<Self> {
        let mdp = TokenMdp {
            vocab_size,
            eos_id,
            horizon,
            prompts,
            enumeration_budget: DEFAULT_ENUMERATION_BUDGET,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn with_budget(mut self, budget: u64) -> Self {
        self.enumeration_budget = budget;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 {
            return Err(Error::config("vocab_size", "must be positive"));
        }
        if self.eos_id >= self.vocab_size {
            return Err(Error::config("eos_id", "must be below vocab_size"));
        }
        if self.horizon == 0 {
            return Err(Error::config("horizon", "must be at least 1"));
        }
        for (i, p) in self.prompts.iter().enumerate() {
            if let Some(&t) = p.iter().find(|&&t| t >= self.vocab_size) {
                return Err(Error::config(
                    format!("prompts[{i}]"),
                    format!("token {t} outside vocabulary"),
                ));
            }
        }
        Ok(())
    }

    pub fn initial_state(&self, prompt: &[Token]) -> State {
        State::new(prompt, &[])
    }

    fn is_terminal_after(&self, generated: &[Token]) -> bool {
        generated.last() == Some(&self.eos_id) || generated.len() >= self.horizon
    }

    /// Appends `action` to the state. Pure: `state` is not modified.
    pub fn transition(&self, state: &State, action: Token) -> Result<State> {
        if state.terminal {
            return Err(Error::precondition(format!(
                "transition from terminal state {state}"
            )));
        }
        if action >= self.vocab_size {
            return Err(Error::precondition(format!(
                "action {action} outside vocabulary of size {}",
                self.vocab_size
            )));
        }
        let mut generated = state.generated.clone();
        generated.push(action);
        let terminal = self.is_terminal_after(&generated);
        Ok(State {
            prompt: state.prompt.clone(),
            generated,
            terminal,
        })
    }

    /// Builds a trajectory from an explicit action list, validating each step.
    pub fn trajectory(&self, prompt: &[Token], actions: &[Token]) -> Result<Trajectory> {
        let mut state = self.initial_state(prompt);
        for &a in actions {
            state = self.transition(&state, a)?;
        }
        Ok(Trajectory {
            prompt: prompt.to_vec(),
            actions: actions.to_vec(),
            terminal: state.terminal,
        })
    }

    /// Number of terminal trajectories reachable from one prompt, computed from
    /// the closed form without enumerating.
    pub fn trajectories_per_prompt(&self) -> u128 {
        // N(1) = |A|, N(h) = 1 + (|A| - 1) N(h - 1)
        let v = self.vocab_size as u128;
        let mut n: u128 = 1;
        for _ in 0..self.horizon {
            n = n.saturating_mul(v - 1).saturating_add(1);
        }
        n
    }

    fn check_budget(&self, needed: u128) -> Result<()> {
        if needed > self.enumeration_budget as u128 {
            return Err(Error::BudgetExceeded {
                needed,
                budget: self.enumeration_budget as u128,
            });
        }
        Ok(())
    }

    /// Every terminal trajectory from `prompt`, in lexicographic order of the
    /// action sequence.
    pub fn enumerate_trajectories(&self, prompt: &[Token]) -> Result<Vec<Trajectory>> {
        self.check_budget(self.trajectories_per_prompt())?;
        let mut out = Vec::new();
        let mut actions = Vec::with_capacity(self.horizon);
        self.dfs_trajectories(prompt, &mut actions, &mut out);
        Ok(out)
    }

    fn dfs_trajectories(
        &self,
        prompt: &[Token],
        actions: &mut Vec<Token>,
        out: &mut Vec<Trajectory>,
    ) {
        for a in 0..self.vocab_size {
            actions.push(a);
            if self.is_terminal_after(actions) {
                out.push(Trajectory {
                    prompt: prompt.to_vec(),
                    actions: actions.clone(),
                    terminal: true,
                });
            } else {
                self.dfs_trajectories(prompt, actions, out);
            }
            actions.pop();
        }
    }

    /// Continuations of `state` to termination, as action suffixes.
    pub fn enumerate_continuations(&self, state: &State) -> Result<Vec<Vec<Token>>> {
        if state.terminal {
            return Ok(vec![Vec::new()]);
        }
        let sub = TokenMdp {
            horizon: self.horizon - state.depth(),
            ..self.clone()
        };
        self.check_budget(sub.trajectories_per_prompt())?;
        let mut buf = Vec::new();
        sub.dfs_trajectories(&[], &mut Vec::new(), &mut buf);
        Ok(buf.into_iter().map(|t| t.actions).collect())
    }

    /// Non-terminal states reachable from `prompt`, in depth-first
    /// lexicographic order (parents before children).
    pub fn reachable_states(&self, prompt: &[Token]) -> Result<Vec<State>> {
        self.check_budget(self.trajectories_per_prompt())?;
        let mut out = Vec::new();
        let mut generated = Vec::new();
        self.dfs_states(prompt, &mut generated, &mut out);
        Ok(out)
    }

    fn dfs_states(&self, prompt: &[Token], generated: &mut Vec<Token>, out: &mut Vec<State>) {
        out.push(State::new(prompt, generated));
        for a in 0..self.vocab_size {
            generated.push(a);
            if !self.is_terminal_after(generated) {
                self.dfs_states(prompt, generated, out);
            }
            generated.pop();
        }
    }

    /// Non-terminal states of every prompt.
    pub fn all_states(&self) -> Result<Vec<State>> {
        let mut out = Vec::new();
        for p in &self.prompts {
            out.extend(self.reachable_states(p)?);
        }
        Ok(out)
    }
}

/// Ground-truth token reward `r(s, a)` on every reachable non-terminal state.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruthReward {
    pub table: BTreeMap<State, Vec<f64>>,
}

impl GroundTruthReward {
    pub fn get(&self, state: &State, action: Token) -> Result<f64> {
        self.table
            .get(state)
            .and_then(|row| row.get(action))
            .copied()
            .ok_or_else(|| Error::RewardDomain {
                state: state.clone(),
                action,
            })
    }

    pub fn row(&self, state: &State) -> Result<&[f64]> {
        self.table
            .get(state)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::RewardDomain {
                state: state.clone(),
                action: 0,
            })
    }

    pub fn max_abs(&self) -> f64 {
        self.table
            .values()
            .flatten()
            .fold(0.0, |m, r| m.max(r.abs()))
    }
}

/// `R(τ) = Σ_t r(s_t, a_t)`.
pub fn cumulative_reward(reward: &GroundTruthReward, traj: &Trajectory) -> Result<f64> {
    response_reward(reward, &traj.prompt, &traj.actions)
}

/// Same as [`cumulative_reward`] on a bare `(x, y)` pair.
pub fn response_reward(reward: &GroundTruthReward, x: &[Token], y: &[Token]) -> Result<f64> {
    let mut total = 0.0;
    for (state, a) in prefix_states(x, y).zip(y.iter().copied()) {
        total += reward.get(&state, a)?;
    }
    Ok(total)
}
