use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{kl_penalized_reward, GranularityKind, RewardGranularity};
use crate::error::{Error, Result};
use crate::mdp::{GroundTruthReward, State, Token, TokenMdp};
use crate::pipeline::data::InstructionPair;
use crate::pipeline::eval::expected_reward_and_kl;
use crate::pipeline::metrics::MetricsRecord;
use crate::policy::{
    sft_loss_and_grad, GradientAccumulator, Optimizer, OptimizerConfig, TabularPolicy,
};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    /// `None` disables clipping.
    pub clip_epsilon: Option<f64>,
    pub inner_epochs: usize,
    pub rollouts_per_prompt: usize,
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    pub critic_lr: f64,
    pub sft_weight: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            clip_epsilon: Some(0.2),
            inner_epochs: 4,
            rollouts_per_prompt: 8,
            epochs: 20,
            optimizer: OptimizerConfig::Sgd { lr: 0.5 },
            critic_lr: 0.5,
            sft_weight: 1.0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self, path: &str) -> Result<()> {
        if self.rollouts_per_prompt == 0 {
            return Err(Error::config(
                format!("{path}.rollouts_per_prompt"),
                "rollout budget must be positive",
            ));
        }
        if self.inner_epochs == 0 {
            return Err(Error::config(
                format!("{path}.inner_epochs"),
                "must be positive",
            ));
        }
        if let Some(eps) = self.clip_epsilon {
            if eps.is_nan() || eps <= 0.0 {
                return Err(Error::config(
                    format!("{path}.clip_epsilon"),
                    "must be positive",
                ));
            }
        }
        if !(self.critic_lr > 0.0 && self.critic_lr <= 1.0) {
            return Err(Error::config(
                format!("{path}.critic_lr"),
                "must lie in (0, 1]",
            ));
        }
        if self.sft_weight.is_nan() || self.sft_weight < 0.0 {
            return Err(Error::config(
                format!("{path}.sft_weight"),
                "must be nonnegative",
            ));
        }
        self.optimizer.validate(&format!("{path}.optimizer"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PpoSample {
    pub state: State,
    pub action: Token,
    pub old_logp: f64,
    pub ret: f64,
    pub advantage: f64,
}

/// Per-state value estimates used as the PPO baseline.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CriticTable {
    values: BTreeMap<State, f64>,
}

impl CriticTable {
    pub fn get(&self, state: &State) -> f64 {
        self.values.get(state).copied().unwrap_or(0.0)
    }

    /// Moves each visited state's value toward the mean return observed there,
    /// one gradient step on the squared error with step size `lr`.
    pub fn fit(&mut self, samples: &[PpoSample], lr: f64) {
        let mut sums: BTreeMap<&State, (f64, usize)> = BTreeMap::new();
        for s in samples {
            let e = sums.entry(&s.state).or_default();
            e.0 += s.ret;
            e.1 += 1;
        }
        for (state, (sum, n)) in sums {
            let v = self.values.entry(state.clone()).or_insert(0.0);
            *v += lr * (sum / n as f64 - *v);
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Clipped surrogate `−(1/N) Σ min(ρ·A, clip(ρ, 1−ε, 1+ε)·A)` and its gradient.
pub fn ppo_surrogate_loss(
    policy: &TabularPolicy,
    samples: &[PpoSample],
    clip_epsilon: Option<f64>,
) -> Result<(f64, GradientAccumulator)> {
    if samples.is_empty() {
        return Err(Error::precondition("empty PPO batch"));
    }
    let n = samples.len() as f64;
    let mut grad = GradientAccumulator::new(policy.vocab_size());
    let mut loss = 0.0;
    for s in samples {
        let logp = policy.log_probs(&s.state);
        let ratio = (logp[s.action] - s.old_logp).exp();
        let unclipped = ratio * s.advantage;
        let clipped = match clip_epsilon {
            Some(eps) => ratio.clamp(1.0 - eps, 1.0 + eps) * s.advantage,
            None => unclipped,
        };
        loss -= unclipped.min(clipped) / n;
        if unclipped <= clipped {
            let probs: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
            crate::policy::add_nll_grad(&mut grad, &s.state, &probs, s.action, unclipped / n);
        } else {
            grad.touch(&s.state);
        }
    }
    Ok((loss, grad))
}

/// REINFORCE-with-baseline gradient `−(1/N) Σ A·∇log π(a|s)`.
pub fn vanilla_policy_gradient(
    policy: &TabularPolicy,
    samples: &[PpoSample],
) -> GradientAccumulator {
    let n = samples.len() as f64;
    let mut grad = GradientAccumulator::new(policy.vocab_size());
    for s in samples {
        let probs = policy.action_distribution(&s.state);
        crate::policy::add_nll_grad(&mut grad, &s.state, &probs, s.action, s.advantage / n);
    }
    grad
}

/// Inputs shared by every DPPO run.
#[derive(Debug, Clone, Copy)]
pub struct DppoTeachers<'a> {
    pub student_ref: &'a TabularPolicy,
    pub dpo: &'a TabularPolicy,
    pub reference: &'a TabularPolicy,
}

fn collect_rollouts<R: Rng>(
    policy: &TabularPolicy,
    teachers: DppoTeachers<'_>,
    granularity: RewardGranularity,
    mdp: &TokenMdp,
    per_prompt: usize,
    critic: &CriticTable,
    rng: &mut R,
) -> Result<Vec<PpoSample>> {
    let mut out = Vec::new();
    for prompt in &mdp.prompts {
        for _ in 0..per_prompt {
            let traj = policy.sample_response(mdp, prompt, rng);
            let rewards = kl_penalized_reward(
                granularity,
                policy,
                teachers.student_ref,
                teachers.dpo,
                teachers.reference,
                prompt,
                &traj.actions,
            )?;
            let mut ret = 0.0;
            let mut rets = vec![0.0; rewards.len()];
            for t in (0..rewards.len()).rev() {
                ret += rewards[t];
                rets[t] = ret;
            }
            for ((state, action), ret) in traj.steps().zip(rets) {
                let old_logp = policy.log_prob(&state, action);
                let advantage = ret - critic.get(&state);
                out.push(PpoSample {
                    state,
                    action,
                    old_logp,
                    ret,
                    advantage,
                });
            }
        }
    }
    Ok(out)
}

/// PPO distillation from the teacher pair's token- or sequence-level reward,
/// with a KL penalty against `student_ref` and an SFT term on `sft_data`.
/// One metrics row per outer epoch, scored against the ground-truth reward.
#[allow(clippy::too_many_arguments)]
pub fn dppo_train(
    student: &TabularPolicy,
    teachers: DppoTeachers<'_>,
    granularity: RewardGranularity,
    cfg: &PpoConfig,
    mdp: &TokenMdp,
    truth: &GroundTruthReward,
    sft_data: &[InstructionPair],
    run_seed: u64,
) -> Result<(TabularPolicy, Vec<MetricsRecord>)> {
    cfg.validate("ppo")?;
    let method = match granularity.kind {
        GranularityKind::TokenLevel => "dppo-token",
        GranularityKind::SequenceLevel => "dppo-seq",
        GranularityKind::DistributionLevel => {
            return Err(Error::Granularity(
                "DPPO needs a token- or sequence-level reward".into(),
            ));
        }
    };
    let mut policy = student.clone();
    let mut optimizer = Optimizer::new(cfg.optimizer);
    let mut critic = CriticTable::default();
    let mut rng = seed::stream(run_seed, "rollout");
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut queries: u64 = 0;
    for epoch in 1..=cfg.epochs {
        let samples = collect_rollouts(
            &policy,
            teachers,
            granularity,
            mdp,
            cfg.rollouts_per_prompt,
            &critic,
            &mut rng,
        )?;
        queries += (mdp.prompts.len() * cfg.rollouts_per_prompt) as u64;
        critic.fit(&samples, cfg.critic_lr);
        let mut loss = 0.0;
        for _ in 0..cfg.inner_epochs {
            let (l, mut grad) = ppo_surrogate_loss(&policy, &samples, cfg.clip_epsilon)?;
            loss = l;
            if cfg.sft_weight > 0.0 && !sft_data.is_empty() {
                let w = cfg.sft_weight / sft_data.len() as f64;
                for pair in sft_data {
                    let (l, g) = sft_loss_and_grad(&policy, &pair.prompt, &pair.response)?;
                    loss += w * l;
                    grad.merge(&g, w);
                }
            }
            if !loss.is_finite() || !grad.is_finite() {
                return Err(Error::Divergence {
                    phase: method.into(),
                    step: epoch,
                });
            }
            optimizer.step(&mut policy, &grad);
        }
        let (mean_true_reward, kl_to_ref) =
            expected_reward_and_kl(&policy, teachers.student_ref, mdp, truth)?;
        records.push(MetricsRecord {
            method: method.into(),
            phase: method.into(),
            step: epoch,
            seed: run_seed,
            mean_true_reward,
            reward_accuracy: None,
            loss,
            kl_to_ref,
            queries_used: queries,
        });
    }
    Ok((policy, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyRole;

    fn batch() -> (TabularPolicy, Vec<PpoSample>) {
        let s = State::new(&[1], &[]);
        let mut p = TabularPolicy::uniform(3, PolicyRole::Student);
        *p.logits_mut(&s) = vec![0.3, -0.2, 0.1];
        let samples = (0..3)
            .map(|a| PpoSample {
                state: s.clone(),
                action: a,
                old_logp: p.log_prob(&s, a),
                ret: a as f64 - 1.0,
                advantage: a as f64 - 0.8,
            })
            .collect();
        (p, samples)
    }

    #[test]
    fn unclipped_first_step_is_vanilla_gradient() {
        let (p, samples) = batch();
        let (_, g) = ppo_surrogate_loss(&p, &samples, None).unwrap();
        assert!(g.max_abs_diff(&vanilla_policy_gradient(&p, &samples)) < 1e-12);
    }

    #[test]
    fn clipped_branch_has_zero_gradient() {
        let (mut p, samples) = batch();
        let s = samples[2].state.clone();
        // push ρ for the positive-advantage action far above 1 + ε
        p.logits_mut(&s)[2] += 3.0;
        let (_, g) = ppo_surrogate_loss(&p, &samples[2..], Some(0.2)).unwrap();
        assert!(g.norm() < 1e-15);
    }

    #[test]
    fn critic_moves_toward_mean_return() {
        let (_, samples) = batch();
        let mut c = CriticTable::default();
        c.fit(&samples, 0.5);
        assert!((c.get(&samples[0].state) - 0.0).abs() < 1e-15);
        c.fit(&samples[2..], 1.0);
        assert_eq!(c.get(&samples[0].state), 1.0);
    }

    #[test]
    fn zero_rollouts_is_config_error() {
        let cfg = PpoConfig {
            rollouts_per_prompt: 0,
            ..PpoConfig::default()
        };
        assert!(matches!(cfg.validate("ppo"), Err(Error::Config { .. })));
    }
}
