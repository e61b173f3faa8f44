//! Shared fixtures and oracles that do not go through the library's solvers.
#![allow(dead_code)]

use alignlab::gradcheck::{check_gradient, DEFAULT_STEP};
use alignlab::mdp::{GroundTruthReward, State, Token, TokenMdp};
use alignlab::objectives::{
    adpa_loss, dckd_loss, dpo_loss, kd_loss, q_argmax_kd_loss, q_softmax_kd_loss, AdpaOptions,
    AdvantageView,
};
use alignlab::policy::{sft_loss_and_grad, GradientAccumulator, PolicyRole, TabularPolicy};
use alignlab::rl::{ppo_surrogate_loss, PpoSample};
use alignlab::seed::{self, LabRng};
use alignlab::task::{synth_task, Task, TaskConfig};
use rand::Rng;

/// Random task with `|A| <= max_vocab` and `T <= max_horizon`.
pub fn random_task(seed: u64, max_vocab: usize, max_horizon: usize) -> Task {
    let mut rng = seed::stream(seed, "test-task-shape");
    let v = rng.random_range(2..=max_vocab);
    let t = rng.random_range(1..=max_horizon);
    let mut cfg = TaskConfig::new(v, t);
    cfg.prompt_len = 1;
    cfg.num_prompts = rng.random_range(1..=2).min(v - 1);
    synth_task(seed, &cfg).unwrap()
}

pub fn random_policy(
    mdp: &TokenMdp,
    role: PolicyRole,
    scale: f64,
    rng: &mut LabRng,
) -> TabularPolicy {
    TabularPolicy::random(mdp, role, scale, rng).unwrap()
}

/// Every action sequence the MDP admits from `prefix`, by direct recursion.
pub fn continuations(
    vocab: usize,
    eos: Token,
    horizon: usize,
    prefix: &[Token],
) -> Vec<Vec<Token>> {
    if prefix.len() == horizon || prefix.last() == Some(&eos) {
        return vec![prefix.to_vec()];
    }
    let mut out = Vec::new();
    for a in 0..vocab {
        let mut p = prefix.to_vec();
        p.push(a);
        out.extend(continuations(vocab, eos, horizon, &p));
    }
    out
}

/// Trajectories per prompt: `N(0) = 1`, `N(t) = 1 + (|A| − 1) N(t − 1)`.
pub fn recursive_count(vocab: u128, horizon: usize) -> u128 {
    (0..horizon).fold(1, |n, _| 1 + (vocab - 1) * n)
}

pub fn path_reward(reward: &GroundTruthReward, x: &[Token], y: &[Token]) -> f64 {
    (0..y.len())
        .map(|t| reward.get(&State::new(x, &y[..t]), y[t]).unwrap())
        .sum()
}

pub fn path_logprob(policy: &TabularPolicy, x: &[Token], y: &[Token]) -> f64 {
    (0..y.len())
        .map(|t| {
            let s = State::new(x, &y[..t]);
            let logits = policy
                .logits(&s)
                .map(<[f64]>::to_vec)
                .unwrap_or(vec![0.0; policy.vocab_size()]);
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            logits[y[t]] - m - z.ln()
        })
        .sum()
}

/// Soft value from a state by brute force:
/// `β log Σ_{continuations} π_ref(c | s) exp(R(c | s) / β)`.
pub fn brute_soft_value(
    mdp: &TokenMdp,
    reward: &GroundTruthReward,
    reference: &TabularPolicy,
    beta: f64,
    x: &[Token],
    prefix: &[Token],
) -> f64 {
    let terms: Vec<f64> = continuations(mdp.vocab_size, mdp.eos_id, mdp.horizon, prefix)
        .into_iter()
        .map(|y| {
            let tail = &y[prefix.len()..];
            let mut full_lp = 0.0;
            let mut r = 0.0;
            for (i, &a) in tail.iter().enumerate() {
                let gen = &y[..prefix.len() + i];
                let s = State::new(x, gen);
                full_lp += path_logprob(reference, x, &[gen, &[a]].concat())
                    - path_logprob(reference, x, gen);
                r += reward.get(&s, a).unwrap();
            }
            full_lp + r / beta
        })
        .collect();
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    beta * (m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln())
}

/// Stable logistic function, written out here rather than taken from the library.
pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One random instance for the gradient oracle: a small MDP, a student, two
/// teachers, a prompt and three distinct responses.
pub struct LossInstance {
    pub index: u64,
    pub mdp: TokenMdp,
    pub student: TabularPolicy,
    pub dpo: TabularPolicy,
    pub reference: TabularPolicy,
    pub x: Vec<Token>,
    pub y_w: Vec<Token>,
    pub y_l: Vec<Token>,
    pub y_hat: Vec<Token>,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

pub fn loss_instance(i: u64) -> LossInstance {
    let mut rng = seed::stream(i, "loss-instance");
    let v = rng.random_range(2..=5);
    let t = rng.random_range(2..=4);
    let x = vec![rng.random_range(1..v)];
    let mdp = TokenMdp::new(v, 0, t, vec![x.clone()]).unwrap();
    let student = random_policy(&mdp, PolicyRole::Student, 2.0, &mut rng);
    let dpo = random_policy(&mdp, PolicyRole::DpoTeacher, 2.0, &mut rng);
    let reference = random_policy(&mdp, PolicyRole::ReferenceTeacher, 2.0, &mut rng);
    let sampler = TabularPolicy::uniform(v, PolicyRole::Student);
    let y_w = sampler.sample_response(&mdp, &x, &mut rng).actions;
    let mut y_l = sampler.sample_response(&mdp, &x, &mut rng).actions;
    while y_l == y_w {
        y_l = sampler.sample_response(&mdp, &x, &mut rng).actions;
    }
    let y_hat = student.sample_response(&mdp, &x, &mut rng).actions;
    LossInstance {
        index: i,
        mdp,
        student,
        dpo,
        reference,
        x,
        y_w,
        y_l,
        y_hat,
        alpha: rng.random_range(0.1..5.0),
        beta: rng.random_range(0.05..2.0),
        gamma: rng.random_range(0.5..5.0),
    }
}

/// PPO batch over random states. Samples whose ratio sits within `1e-3` of a
/// clip edge are redrawn so finite differences never straddle a kink.
pub fn ppo_batch(inst: &LossInstance, eps: f64) -> Vec<PpoSample> {
    let mut rng = seed::stream(inst.index, "ppo-batch");
    let states: Vec<State> = inst
        .mdp
        .all_states()
        .unwrap()
        .into_iter()
        .filter(|s| !s.terminal)
        .collect();
    (0..8)
        .map(|_| {
            let state = states[rng.random_range(0..states.len())].clone();
            let action = rng.random_range(0..inst.mdp.vocab_size);
            let logp = inst.student.log_prob(&state, action);
            let old_logp = loop {
                let o = logp + rng.random_range(-0.5..0.5);
                let ratio = (logp - o).exp();
                if (ratio - (1.0 - eps)).abs() > 1e-3 && (ratio - (1.0 + eps)).abs() > 1e-3 {
                    break o;
                }
            };
            PpoSample {
                state,
                action,
                old_logp,
                ret: 0.0,
                advantage: rng.random_range(-2.0..2.0),
            }
        })
        .collect()
}

pub type LossFn = Box<dyn Fn(&LossInstance, &TabularPolicy) -> (f64, GradientAccumulator)>;

/// Every differentiable objective, evaluated at the instance's data.
pub fn losses() -> Vec<(&'static str, LossFn)> {
    vec![
        (
            "sft",
            Box::new(|i: &LossInstance, p: &TabularPolicy| {
                sft_loss_and_grad(p, &i.x, &i.y_w).unwrap()
            }),
        ),
        (
            "kd",
            Box::new(|i: &LossInstance, p: &TabularPolicy| {
                kd_loss(p, &i.dpo, &i.x, &i.y_w, i.alpha).unwrap()
            }),
        ),
        (
            "dckd",
            Box::new(|i: &LossInstance, p: &TabularPolicy| {
                dckd_loss(p, &i.dpo, &i.x, &i.y_w, &i.y_l, i.alpha).unwrap()
            }),
        ),
        (
            "dpo",
            Box::new(|i: &LossInstance, p: &TabularPolicy| {
                dpo_loss(p, &i.reference, &i.x, &i.y_w, &i.y_l, i.beta).unwrap()
            }),
        ),
        (
            "adpa",
            Box::new(|i: &LossInstance, p: &TabularPolicy| {
                let view = AdvantageView::exact(&i.dpo, &i.reference, i.beta);
                let opts = AdpaOptions {
                    length_normalize: i.index % 2 == 1,
                };
                adpa_loss(p, &view, &i.x, &i.y_w, &i.y_hat, i.gamma, opts).unwrap()
            }),
        ),
        (
            "q-argmax-kd",
            Box::new(|i: &LossInstance, p: &TabularPolicy| {
                let view = AdvantageView::exact(&i.dpo, &i.reference, i.beta);
                q_argmax_kd_loss(p, &view, &i.x, &i.y_w, &i.y_hat, i.gamma).unwrap()
            }),
        ),
        (
            "q-softmax-kd",
            Box::new(|i: &LossInstance, p: &TabularPolicy| {
                let view = AdvantageView::exact(&i.dpo, &i.reference, i.beta);
                q_softmax_kd_loss(p, &view, &i.x, &i.y_w, &i.y_hat, i.gamma).unwrap()
            }),
        ),
        (
            "ppo-clipped",
            Box::new(|i: &LossInstance, p: &TabularPolicy| {
                ppo_surrogate_loss(p, &ppo_batch(i, 0.2), Some(0.2)).unwrap()
            }),
        ),
        (
            "ppo-unclipped",
            Box::new(|i: &LossInstance, p: &TabularPolicy| {
                ppo_surrogate_loss(p, &ppo_batch(i, 0.2), None).unwrap()
            }),
        ),
    ]
}

/// Worst relative finite-difference error of `loss` over `n` instances.
pub fn worst_fd_error(loss: &LossFn, n: u64) -> f64 {
    (0..n)
        .map(|i| {
            let inst = loss_instance(i);
            let (_, grad) = loss(&inst, &inst.student);
            check_gradient(&inst.student, &grad, |p| loss(&inst, p).0, DEFAULT_STEP).relative_error
        })
        .fold(0.0, f64::max)
}
