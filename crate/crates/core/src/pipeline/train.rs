//! Full-batch phase trainers with per-epoch evaluation and checkpoint selection.

use crate::error::{Error, Result};
use crate::mdp::{GroundTruthReward, TokenMdp};
use crate::objectives::dpo_loss;
use crate::pipeline::data::{InstructionPair, PreferenceTriple};
use crate::pipeline::eval::{expected_reward_and_kl, reward_accuracy};
use crate::pipeline::metrics::MetricsRecord;
use crate::policy::{
    sft_loss_and_grad, GradientAccumulator, Optimizer, OptimizerConfig, TabularPolicy,
};

/// What the evaluation rows are scored against.
#[derive(Debug, Clone, Copy)]
pub struct EvalContext<'a> {
    pub mdp: &'a TokenMdp,
    pub reward: &'a GroundTruthReward,
    pub heldout: &'a [PreferenceTriple],
    /// Policy the `kl_to_ref` column is measured against.
    pub kl_ref: &'a TabularPolicy,
}

impl EvalContext<'_> {
    pub fn record(
        &self,
        policy: &TabularPolicy,
        method: &str,
        phase: &str,
        step: usize,
        seed: u64,
        loss: f64,
    ) -> Result<MetricsRecord> {
        let (mean_true_reward, kl_to_ref) =
            expected_reward_and_kl(policy, self.kl_ref, self.mdp, self.reward)?;
        Ok(MetricsRecord {
            method: method.into(),
            phase: phase.into(),
            step,
            seed,
            mean_true_reward,
            reward_accuracy: Some(reward_accuracy(policy, self.heldout)),
            loss,
            kl_to_ref,
            queries_used: 0,
        })
    }
}

#[derive(Debug, Clone)]
pub struct PhaseSpec<'a> {
    pub method: &'a str,
    pub phase: &'a str,
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    pub eval_every: usize,
    pub seed: u64,
    /// Added to every recorded step index.
    pub step_offset: usize,
}

#[derive(Debug, Clone)]
pub struct PhaseOutcome {
    pub last: TabularPolicy,
    pub best: TabularPolicy,
    pub best_index: Option<usize>,
    pub records: Vec<MetricsRecord>,
}

/// Index of the highest `mean_true_reward`; ties go to the earliest row.
pub fn select_checkpoint(records: &[MetricsRecord]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, r) in records.iter().enumerate() {
        if best.is_none_or(|b| r.mean_true_reward > records[b].mean_true_reward) {
            best = Some(i);
        }
    }
    best
}

/// Runs `spec.epochs` full-batch steps of `loss`. With an evaluation context,
/// scores the policy every `eval_every` epochs and keeps the best snapshot.
pub fn train_phase<F>(
    init: &TabularPolicy,
    spec: &PhaseSpec<'_>,
    eval: Option<&EvalContext<'_>>,
    loss: F,
) -> Result<PhaseOutcome>
where
    F: Fn(&TabularPolicy) -> Result<(f64, GradientAccumulator)>,
{
    let mut policy = init.clone();
    let mut optimizer = Optimizer::new(spec.optimizer);
    let mut records = Vec::new();
    let mut best = init.clone();
    let mut best_reward = f64::NEG_INFINITY;
    let mut best_index = None;
    for epoch in 1..=spec.epochs {
        let (l, grad) = loss(&policy)?;
        if !l.is_finite() || !grad.is_finite() {
            return Err(Error::Divergence {
                phase: spec.phase.into(),
                step: epoch,
            });
        }
        optimizer.step(&mut policy, &grad);
        if let Some(ctx) = eval {
            if epoch % spec.eval_every == 0 || epoch == spec.epochs {
                let rec = ctx.record(
                    &policy,
                    spec.method,
                    spec.phase,
                    spec.step_offset + epoch,
                    spec.seed,
                    l,
                )?;
                if rec.mean_true_reward > best_reward {
                    best_reward = rec.mean_true_reward;
                    best = policy.clone();
                    best_index = Some(records.len());
                }
                records.push(rec);
            }
        }
    }
    if eval.is_none() {
        best = policy.clone();
    }
    Ok(PhaseOutcome {
        last: policy,
        best,
        best_index,
        records,
    })
}

/// Mean of per-item losses and gradients.
pub fn batch_loss<T, F>(
    policy: &TabularPolicy,
    items: &[T],
    f: F,
) -> Result<(f64, GradientAccumulator)>
where
    F: Fn(&TabularPolicy, &T) -> Result<(f64, GradientAccumulator)>,
{
    if items.is_empty() {
        return Err(Error::precondition("empty training batch"));
    }
    let w = 1.0 / items.len() as f64;
    let mut total = 0.0;
    let mut grad = GradientAccumulator::new(policy.vocab_size());
    for item in items {
        let (l, g) = f(policy, item)?;
        total += w * l;
        grad.merge(&g, w);
    }
    Ok((total, grad))
}

/// Full-batch SFT for `epochs` steps; returns the final snapshot.
pub fn run_sft_phase(
    policy: &TabularPolicy,
    data: &[InstructionPair],
    epochs: usize,
    optimizer: OptimizerConfig,
) -> Result<TabularPolicy> {
    if data.is_empty() {
        return Err(Error::precondition(
            "SFT needs at least one instruction pair",
        ));
    }
    let spec = PhaseSpec {
        method: "sft",
        phase: "sft",
        epochs,
        optimizer,
        eval_every: 1,
        seed: 0,
        step_offset: 0,
    };
    let out = train_phase(policy, &spec, None, |p| {
        batch_loss(p, data, |p, d| sft_loss_and_grad(p, &d.prompt, &d.response))
    })?;
    Ok(out.last)
}

/// Full-batch DPO against a frozen `reference`; returns the final snapshot.
pub fn run_dpo_phase(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    data: &[PreferenceTriple],
    beta: f64,
    epochs: usize,
    optimizer: OptimizerConfig,
) -> Result<TabularPolicy> {
    if data.is_empty() {
        return Err(Error::precondition(
            "DPO needs at least one preference pair",
        ));
    }
    let spec = PhaseSpec {
        method: "dpo",
        phase: "dpo",
        epochs,
        optimizer,
        eval_every: 1,
        seed: 0,
        step_offset: 0,
    };
    let out = train_phase(policy, &spec, None, |p| {
        batch_loss(p, data, |p, t| {
            dpo_loss(p, reference, &t.prompt, &t.preferred, &t.dispreferred, beta)
        })
    })?;
    Ok(out.last)
}
