//! Exact KL-regularized optimum by backward induction, and the identities it
//! must satisfy: the soft Bellman value, the advantage/log-ratio identity,
//! the telescoping reward sum, and same-prompt implicit-reward equality.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::log_sum_exp;
use crate::mdp::{cumulative_reward, GroundTruthReward, State, TokenMdp, Trajectory};
use crate::policy::{PolicyRole, TabularPolicy};

/// `Q*`, `V*` and `π*` for a reference policy and temperature β.
#[derive(Debug, Clone)]
pub struct OptimalSolution {
    pub beta: f64,
    pub q_star: BTreeMap<State, Vec<f64>>,
    pub v_star: BTreeMap<State, f64>,
    pub pi_star: TabularPolicy,
}

impl OptimalSolution {
    /// `V*(s)`, zero on terminal states.
    pub fn value(&self, state: &State) -> f64 {
        if state.terminal {
            0.0
        } else {
            self.v_star.get(state).copied().unwrap_or(0.0)
        }
    }

    pub fn q_row(&self, state: &State) -> Option<&[f64]> {
        self.q_star.get(state).map(Vec::as_slice)
    }

    /// `A*(s, ·) = Q*(s, ·) − V*(s)`.
    pub fn advantage_row(&self, state: &State) -> Option<Vec<f64>> {
        let v = self.value(state);
        self.q_row(state).map(|q| q.iter().map(|x| x - v).collect())
    }
}

/// Sweeps states from deepest to shallowest:
/// `Q*(s,a) = r(s,a) + V*(f(s,a))`, `V*(s) = β log Σ_a π_ref(a|s) exp(Q*(s,a)/β)`,
/// `π*(a|s) = π_ref(a|s) exp((Q*(s,a) − V*(s))/β)`.
pub fn backward_induction(
    mdp: &TokenMdp,
    reward: &GroundTruthReward,
    reference: &TabularPolicy,
    beta: f64,
) -> Result<OptimalSolution> {
    if !(beta.is_finite() && beta > 0.0) {
        return Err(Error::config("beta", "must be positive"));
    }
    let mut states = mdp.all_states()?;
    states.sort_by_key(|s| std::cmp::Reverse(s.depth()));

    let mut q_star = BTreeMap::new();
    let mut v_star: BTreeMap<State, f64> = BTreeMap::new();
    let mut pi_logits = BTreeMap::new();
    for s in states {
        let mut q = Vec::with_capacity(mdp.vocab_size);
        for a in 0..mdp.vocab_size {
            let next = mdp.transition(&s, a)?;
            let v_next = if next.terminal { 0.0 } else { v_star[&next] };
            q.push(reward.get(&s, a)? + v_next);
        }
        let log_ref = reference.log_probs(&s);
        let scores: Vec<f64> = log_ref
            .iter()
            .zip(&q)
            .map(|(l, qa)| l + qa / beta)
            .collect();
        let v = beta * log_sum_exp(&scores);
        let logits: Vec<f64> = log_ref
            .iter()
            .zip(&q)
            .map(|(l, qa)| l + (qa - v) / beta)
            .collect();
        pi_logits.insert(s.clone(), logits);
        q_star.insert(s.clone(), q);
        v_star.insert(s, v);
    }
    Ok(OptimalSolution {
        beta,
        q_star,
        v_star,
        pi_star: TabularPolicy::from_logits(mdp.vocab_size, PolicyRole::DpoTeacher, pi_logits)?,
    })
}

/// `V*(s)` from its path-integral form, `β log Σ_τ π_ref(τ|s) exp(R(τ|s)/β)`
/// over every continuation of `s`. Independent of the backward sweep.
pub fn soft_value_by_enumeration(
    mdp: &TokenMdp,
    reward: &GroundTruthReward,
    reference: &TabularPolicy,
    beta: f64,
    state: &State,
) -> Result<f64> {
    let mut scores = Vec::new();
    for suffix in mdp.enumerate_continuations(state)? {
        let mut s = state.clone();
        let (mut logp, mut ret) = (0.0, 0.0);
        for &a in &suffix {
            logp += reference.log_prob(&s, a);
            ret += reward.get(&s, a)?;
            s = mdp.transition(&s, a)?;
        }
        scores.push(logp + ret / beta);
    }
    Ok(beta * log_sum_exp(&scores))
}

/// One row of an oracle report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub check_name: String,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl OracleReport {
    pub fn new(check_name: impl Into<String>, max_deviation: f64, tolerance: f64) -> Self {
        OracleReport {
            check_name: check_name.into(),
            max_deviation,
            tolerance,
            pass: max_deviation.is_finite() && max_deviation < tolerance,
        }
    }

    pub fn failed(check_name: impl Into<String>, tolerance: f64) -> Self {
        OracleReport {
            check_name: check_name.into(),
            max_deviation: f64::INFINITY,
            tolerance,
            pass: false,
        }
    }
}

/// Max over states of `|V*(s) − β log Σ_a π_ref(a|s) exp(Q*(s,a)/β)|`, with
/// `Q*` rebuilt from `r + V*(next)`.
pub fn soft_bellman_deviation(
    mdp: &TokenMdp,
    reward: &GroundTruthReward,
    reference: &TabularPolicy,
    sol: &OptimalSolution,
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (s, &v) in &sol.v_star {
        let mut scores = Vec::with_capacity(mdp.vocab_size);
        let log_ref = reference.log_probs(s);
        for (a, lr) in log_ref.iter().enumerate() {
            let q = reward.get(s, a)? + sol.value(&mdp.transition(s, a)?);
            scores.push(lr + q / sol.beta);
        }
        worst = worst.max((v - sol.beta * log_sum_exp(&scores)).abs());
    }
    Ok(worst)
}

/// Max over states of `|V*(s) − V*_path(s)|` against [`soft_value_by_enumeration`].
pub fn path_integral_deviation(
    mdp: &TokenMdp,
    reward: &GroundTruthReward,
    reference: &TabularPolicy,
    sol: &OptimalSolution,
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (s, &v) in &sol.v_star {
        let path = soft_value_by_enumeration(mdp, reward, reference, sol.beta, s)?;
        worst = worst.max((v - path).abs());
    }
    Ok(worst)
}

/// Max over states of `|Σ_a π*(a|s) − 1|`.
pub fn row_sum_deviation(sol: &OptimalSolution) -> f64 {
    sol.q_star
        .keys()
        .map(|s| (sol.pi_star.action_distribution(s).iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

/// Max over `(s, a)` of `|(Q*(s,a) − V*(s)) − β log(π*(a|s)/π_ref(a|s))|`.
pub fn advantage_identity_check(sol: &OptimalSolution, reference: &TabularPolicy) -> f64 {
    let mut worst: f64 = 0.0;
    for (s, q) in &sol.q_star {
        let v = sol.value(s);
        let lp_star = sol.pi_star.log_probs(s);
        let lp_ref = reference.log_probs(s);
        for a in 0..q.len() {
            let lhs = q[a] - v;
            let rhs = sol.beta * (lp_star[a] - lp_ref[a]);
            worst = worst.max((lhs - rhs).abs());
        }
    }
    worst
}

/// Telescoping identity for one terminal trajectory:
/// `Σ_t r(s_t, a_t)` against `β Σ_t log(π*/π_ref)(a_t|s_t) + V*(s_1)`.
pub fn telescoping_check(
    reward: &GroundTruthReward,
    sol: &OptimalSolution,
    reference: &TabularPolicy,
    traj: &Trajectory,
) -> Result<(f64, f64, f64)> {
    if !traj.terminal {
        return Err(Error::precondition(
            "telescoping check needs a terminal trajectory",
        ));
    }
    let lhs = cumulative_reward(reward, traj)?;
    let ratio = sol.pi_star.trajectory_logprob(traj) - reference.trajectory_logprob(traj);
    let s1 = State::new(&traj.prompt, &[]);
    let rhs = sol.beta * ratio + sol.value(&s1);
    Ok((lhs, rhs, (lhs - rhs).abs()))
}

/// For two same-prompt trajectories: the implicit reward difference
/// `β[log(π*/π_ref)(τ_w) − log(π*/π_ref)(τ_l)]` and the true `R(τ_w) − R(τ_l)`.
pub fn implicit_reward_identity(
    reward: &GroundTruthReward,
    sol: &OptimalSolution,
    reference: &TabularPolicy,
    traj_w: &Trajectory,
    traj_l: &Trajectory,
) -> Result<(f64, f64)> {
    if traj_w.prompt != traj_l.prompt {
        return Err(Error::precondition(
            "implicit reward comparison needs a shared prompt",
        ));
    }
    let ratio =
        |t: &Trajectory| sol.pi_star.trajectory_logprob(t) - reference.trajectory_logprob(t);
    let implicit = sol.beta * (ratio(traj_w) - ratio(traj_l));
    let truth = cumulative_reward(reward, traj_w)? - cumulative_reward(reward, traj_l)?;
    Ok((implicit, truth))
}

/// Tolerances of the identity suite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleTolerances {
    pub bellman: f64,
    pub row_sum: f64,
    pub advantage: f64,
    pub telescoping: f64,
    pub implicit_reward: f64,
}

impl Default for OracleTolerances {
    fn default() -> Self {
        OracleTolerances {
            bellman: 1e-10,
            row_sum: 1e-10,
            advantage: 1e-10,
            telescoping: 1e-8,
            implicit_reward: 1e-8,
        }
    }
}

impl OracleTolerances {
    /// Every tolerance set to `tol`.
    pub fn uniform(tol: f64) -> Self {
        OracleTolerances {
            bellman: tol,
            row_sum: tol,
            advantage: tol,
            telescoping: tol,
            implicit_reward: tol,
        }
    }
}

/// Runs every optimum identity on one `(task, π_ref, β)` triple.
pub fn identity_suite(
    mdp: &TokenMdp,
    reward: &GroundTruthReward,
    reference: &TabularPolicy,
    beta: f64,
    tol: &OracleTolerances,
) -> Result<Vec<OracleReport>> {
    let sol = backward_induction(mdp, reward, reference, beta)?;
    let mut out = vec![
        OracleReport::new(
            "soft-bellman-value",
            soft_bellman_deviation(mdp, reward, reference, &sol)?,
            tol.bellman,
        ),
        OracleReport::new(
            "soft-value-path-integral",
            path_integral_deviation(mdp, reward, reference, &sol)?,
            tol.telescoping,
        ),
        OracleReport::new(
            "optimal-policy-row-sum",
            row_sum_deviation(&sol),
            tol.row_sum,
        ),
        OracleReport::new(
            "advantage-log-ratio",
            advantage_identity_check(&sol, reference),
            tol.advantage,
        ),
    ];
    let mut telescoping: f64 = 0.0;
    let mut implicit: f64 = 0.0;
    for prompt in &mdp.prompts {
        let trajs = mdp.enumerate_trajectories(prompt)?;
        for t in &trajs {
            telescoping = telescoping.max(telescoping_check(reward, &sol, reference, t)?.2);
        }
        // All pairs when affordable, otherwise every trajectory against the first.
        if trajs.len() <= 200 {
            for (i, tw) in trajs.iter().enumerate() {
                for tl in &trajs[i..] {
                    let (a, b) = implicit_reward_identity(reward, &sol, reference, tw, tl)?;
                    implicit = implicit.max((a - b).abs());
                }
            }
        } else {
            for tl in &trajs[1..] {
                let (a, b) = implicit_reward_identity(reward, &sol, reference, &trajs[0], tl)?;
                implicit = implicit.max((a - b).abs());
            }
        }
    }
    out.push(OracleReport::new(
        "telescoping-reward-sum",
        telescoping,
        tol.telescoping,
    ));
    out.push(OracleReport::new(
        "implicit-reward-difference",
        implicit,
        tol.implicit_reward,
    ));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_step() -> (TokenMdp, GroundTruthReward, TabularPolicy) {
        // |A| = 2 with EOS = 1 so both actions terminate at T = 1
        let mdp = TokenMdp::new(2, 1, 1, vec![vec![0]]).unwrap();
        let mut r = GroundTruthReward::default();
        r.table.insert(State::new(&[0], &[]), vec![1.0, 0.0]);
        (
            mdp,
            r,
            TabularPolicy::uniform(2, PolicyRole::ReferenceTeacher),
        )
    }

    #[test]
    fn one_step_closed_form() {
        let (mdp, r, reference) = one_step();
        let sol = backward_induction(&mdp, &r, &reference, 1.0).unwrap();
        let s = State::new(&[0], &[]);
        let e = std::f64::consts::E;
        assert!((sol.value(&s) - ((e + 1.0) / 2.0).ln()).abs() < 1e-14);
        assert!((sol.value(&s) - 0.62011).abs() < 1e-5);
        let p = sol.pi_star.action_distribution(&s);
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-14);
        assert!((p[0] - 0.73106).abs() < 1e-5);

        let a = sol.advantage_row(&s).unwrap();
        assert!((a[0] - (p[0] / 0.5).ln()).abs() < 1e-14);
        assert!((a[0] - 0.37989).abs() < 1e-5);
    }

    #[test]
    fn one_step_implicit_reward() {
        let (mdp, r, reference) = one_step();
        let sol = backward_induction(&mdp, &r, &reference, 1.0).unwrap();
        let trajs = mdp.enumerate_trajectories(&[0]).unwrap();
        let (implicit, truth) =
            implicit_reward_identity(&r, &sol, &reference, &trajs[0], &trajs[1]).unwrap();
        assert_eq!(truth, 1.0);
        assert!((implicit - 1.0).abs() < 1e-12);
        for t in &trajs {
            assert!(telescoping_check(&r, &sol, &reference, t).unwrap().2 < 1e-12);
        }
        let (i0, t0) =
            implicit_reward_identity(&r, &sol, &reference, &trajs[0], &trajs[0]).unwrap();
        assert_eq!((i0, t0), (0.0, 0.0));
    }

    #[test]
    fn zero_reward_gives_reference() {
        let mdp = TokenMdp::new(3, 0, 3, vec![vec![1]]).unwrap();
        let mut r = GroundTruthReward::default();
        for s in mdp.all_states().unwrap() {
            r.table.insert(s, vec![0.0; 3]);
        }
        let mut rng = crate::seed::stream(4, "ref");
        let reference =
            TabularPolicy::random(&mdp, PolicyRole::ReferenceTeacher, 1.0, &mut rng).unwrap();
        let sol = backward_induction(&mdp, &r, &reference, 0.5).unwrap();
        for (s, q) in &sol.q_star {
            assert!(q.iter().all(|x| x.abs() < 1e-15));
            assert!(sol.value(s).abs() < 1e-15);
            let a = sol.pi_star.action_distribution(s);
            let b = reference.action_distribution(s);
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-14);
            }
        }
        assert!(advantage_identity_check(&sol, &reference) < 1e-14);
    }

    #[test]
    fn mismatched_prompts_rejected() {
        let mdp = TokenMdp::new(2, 1, 1, vec![vec![0], vec![1]]).unwrap();
        let mut r = GroundTruthReward::default();
        for s in mdp.all_states().unwrap() {
            r.table.insert(s, vec![0.0; 2]);
        }
        let reference = TabularPolicy::uniform(2, PolicyRole::ReferenceTeacher);
        let sol = backward_induction(&mdp, &r, &reference, 1.0).unwrap();
        let a = mdp.trajectory(&[0], &[1]).unwrap();
        let b = mdp.trajectory(&[1], &[1]).unwrap();
        assert!(implicit_reward_identity(&r, &sol, &reference, &a, &b).is_err());
    }

    #[test]
    fn non_terminal_telescoping_rejected() {
        let (mdp, r, reference) = one_step();
        let sol = backward_induction(&mdp, &r, &reference, 1.0).unwrap();
        let t = Trajectory {
            prompt: vec![0],
            actions: vec![],
            terminal: false,
        };
        let _ = mdp;
        assert!(telescoping_check(&r, &sol, &reference, &t).is_err());
    }
}
