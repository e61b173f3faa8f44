//! Distillation and preference objectives over tabular policies. Every loss
//! returns its value together with the exact gradient with respect to the
//! student's logits.

mod advantage;

pub use advantage::{advantage, AdvantageRow, AdvantageView};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{kl_from_log, neg_log_sigmoid, sigmoid, softmax};
use crate::mdp::{prefix_states, State, Token};
use crate::policy::{add_nll_grad, sft_loss_and_grad, GradientAccumulator, TabularPolicy};

/// Default sweep grids.
pub const ALPHA_GRID: [f64; 6] = [0.1, 0.2, 0.5, 1.0, 2.0, 5.0];
pub const GAMMA_GRID: [f64; 6] = [0.5, 1.0, 1.5, 2.0, 3.0, 5.0];
/// DPO temperature used for the teachers.
pub const DEFAULT_BETA: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillHyperparams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for DistillHyperparams {
    fn default() -> Self {
        DistillHyperparams {
            alpha: 0.2,
            beta: DEFAULT_BETA,
            gamma: 1.0,
        }
    }
}

impl DistillHyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::config("beta", "must be positive"));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::config("alpha", "must be non-negative"));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::config("gamma", "must be non-negative"));
        }
        Ok(())
    }
}

fn probs_from_log(logp: &[f64]) -> Vec<f64> {
    logp.iter().map(|l| l.exp()).collect()
}

fn nonempty(y: &[Token], what: &str) -> Result<()> {
    if y.is_empty() {
        Err(Error::precondition(format!("{what} is empty")))
    } else {
        Ok(())
    }
}

/// Adds `coef · Σ_t D_KL(π_teacher(·|s_t) ‖ π_student(·|s_t))` over the
/// states of `(x, y)` and returns the (unweighted) KL sum.
fn add_kl_terms(
    student: &TabularPolicy,
    teacher: &TabularPolicy,
    x: &[Token],
    y: &[Token],
    coef: f64,
    grad: &mut GradientAccumulator,
) -> f64 {
    let mut total = 0.0;
    for s in prefix_states(x, y) {
        let q = teacher.action_distribution(&s);
        let logp = student.log_probs(&s);
        total += kl_from_log(&q, &logp);
        // ∂KL(q‖p)/∂z = p − q
        let p = probs_from_log(&logp);
        let diff: Vec<f64> = p.iter().zip(&q).map(|(pi, qi)| pi - qi).collect();
        grad.add(&s, coef, &diff);
    }
    total
}

/// Word-level KD: `(1/|y|) Σ_t [−log π_θ(y_t|s_t) + α·D_KL(π_t ‖ π_θ)]`.
pub fn kd_loss(
    student: &TabularPolicy,
    teacher: &TabularPolicy,
    x: &[Token],
    y: &[Token],
    alpha: f64,
) -> Result<(f64, GradientAccumulator)> {
    nonempty(y, "KD target response")?;
    let (sft, mut grad) = sft_loss_and_grad(student, x, y)?;
    let norm = 1.0 / y.len() as f64;
    let kl = add_kl_terms(student, teacher, x, y, alpha * norm, &mut grad);
    Ok((sft + alpha * norm * kl, grad))
}

/// Which KL constraints a DCKD step includes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DckdTerms {
    pub preferred: bool,
    pub dispreferred: bool,
}

impl Default for DckdTerms {
    fn default() -> Self {
        DckdTerms {
            preferred: true,
            dispreferred: true,
        }
    }
}

/// `L_SFT(x, y_w) + α (L_KLD-w + L_KLD-l)` with unnormalized per-response KL sums.
pub fn dckd_loss(
    student: &TabularPolicy,
    dpo_teacher: &TabularPolicy,
    x: &[Token],
    y_w: &[Token],
    y_l: &[Token],
    alpha: f64,
) -> Result<(f64, GradientAccumulator)> {
    dckd_loss_with(
        student,
        dpo_teacher,
        x,
        y_w,
        y_l,
        alpha,
        DckdTerms::default(),
    )
}

pub fn dckd_loss_with(
    student: &TabularPolicy,
    teacher: &TabularPolicy,
    x: &[Token],
    y_w: &[Token],
    y_l: &[Token],
    alpha: f64,
    terms: DckdTerms,
) -> Result<(f64, GradientAccumulator)> {
    nonempty(y_w, "preferred response")?;
    nonempty(y_l, "dispreferred response")?;
    let (mut loss, mut grad) = sft_loss_and_grad(student, x, y_w)?;
    if terms.preferred {
        loss += alpha * add_kl_terms(student, teacher, x, y_w, alpha, &mut grad);
    }
    if terms.dispreferred {
        loss += alpha * add_kl_terms(student, teacher, x, y_l, alpha, &mut grad);
    }
    Ok((loss, grad))
}

/// `β · [(log π(y_w) − log π_ref(y_w)) − (log π(y_l) − log π_ref(y_l))]`.
pub fn dpo_margin(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    x: &[Token],
    y_w: &[Token],
    y_l: &[Token],
    beta: f64,
) -> f64 {
    let dw = policy.response_logprob(x, y_w) - reference.response_logprob(x, y_w);
    let dl = policy.response_logprob(x, y_l) - reference.response_logprob(x, y_l);
    beta * (dw - dl)
}

/// `−log σ(β [Δ_w − Δ_l])`.
pub fn dpo_loss(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    x: &[Token],
    y_w: &[Token],
    y_l: &[Token],
    beta: f64,
) -> Result<(f64, GradientAccumulator)> {
    nonempty(y_w, "preferred response")?;
    nonempty(y_l, "dispreferred response")?;
    let margin = dpo_margin(policy, reference, x, y_w, y_l, beta);
    let loss = neg_log_sigmoid(margin);
    // dL/dmargin = −σ(−margin); dΔ/dz_s = e_a − p_s
    let outer = -sigmoid(-margin) * beta;
    let mut grad = GradientAccumulator::new(policy.vocab_size());
    for (y, sign) in [(y_w, 1.0), (y_l, -1.0)] {
        for (s, &a) in prefix_states(x, y).zip(y) {
            let p = policy.action_distribution(&s);
            // ∂(log p_a)/∂z = e_a − p, so the NLL-style helper adds −(e_a − p).
            add_nll_grad(&mut grad, &s, &p, a, -sign * outer);
        }
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdpaOptions {
    /// Scale the distillation sum by `1/|ŷ|`. Off by default.
    #[serde(default)]
    pub length_normalize: bool,
}

fn distill_coef(gamma: f64, y_hat: &[Token], length_normalize: bool) -> f64 {
    if length_normalize {
        gamma / y_hat.len() as f64
    } else {
        gamma
    }
}

/// ADPA: `L_SFT(x, y) − γ Σ_t Σ_a π_θ(a|s_t) · log(π_dpo(a|s_t)/π_ref(a|s_t))`
/// with `s_t = (x, ŷ_<t)`.
pub fn adpa_loss(
    student: &TabularPolicy,
    view: &AdvantageView<'_>,
    x: &[Token],
    y: &[Token],
    y_hat: &[Token],
    gamma: f64,
    opts: AdpaOptions,
) -> Result<(f64, GradientAccumulator)> {
    nonempty(y_hat, "generated response")?;
    let (sft, mut grad) = sft_loss_and_grad(student, x, y)?;
    let coef = distill_coef(gamma, y_hat, opts.length_normalize);
    let mut expected = 0.0;
    for s in prefix_states(x, y_hat) {
        let p = student.action_distribution(&s);
        let w = view.row(&s)?.dense_log_ratios(student.vocab_size());
        expected += p.iter().zip(&w).map(|(pi, wi)| pi * wi).sum::<f64>();
    }
    grad.merge(
        &adpa_grad_policy_form(student, view, x, y_hat, gamma, opts)?,
        1.0,
    );
    Ok((sft - coef * expected, grad))
}

/// Gradient of the ADPA distillation term written as a policy gradient:
/// `−γ Σ_t E_{a∼π_θ}[∇ log π_θ(a|s_t) · w(s_t, a)]`, with the expectation
/// summed exactly over the vocabulary.
pub fn adpa_grad_policy_form(
    student: &TabularPolicy,
    view: &AdvantageView<'_>,
    x: &[Token],
    y_hat: &[Token],
    gamma: f64,
    opts: AdpaOptions,
) -> Result<GradientAccumulator> {
    nonempty(y_hat, "generated response")?;
    let coef = distill_coef(gamma, y_hat, opts.length_normalize);
    let v = student.vocab_size();
    let mut grad = GradientAccumulator::new(v);
    for s in prefix_states(x, y_hat) {
        let p = student.action_distribution(&s);
        let w = view.row(&s)?.dense_log_ratios(v);
        grad.touch(&s);
        for a in 0..v {
            // ∇_z log π(a) = e_a − p
            let weight = -coef * p[a] * w[a];
            grad.add(&s, -weight, &p);
            grad.add_at(&s, a, weight);
        }
    }
    Ok(grad)
}

/// Same gradient by direct differentiation of the probabilities:
/// `−γ Σ_t Σ_a ∇π_θ(a|s_t) · w(s_t, a)` with the softmax Jacobian
/// `∂π_a/∂z_j = π_a (δ_aj − π_j)`.
pub fn adpa_grad_direct(
    student: &TabularPolicy,
    view: &AdvantageView<'_>,
    x: &[Token],
    y_hat: &[Token],
    gamma: f64,
    opts: AdpaOptions,
) -> Result<GradientAccumulator> {
    nonempty(y_hat, "generated response")?;
    let coef = distill_coef(gamma, y_hat, opts.length_normalize);
    let v = student.vocab_size();
    let mut grad = GradientAccumulator::new(v);
    for s in prefix_states(x, y_hat) {
        let p = student.action_distribution(&s);
        let w = view.row(&s)?.dense_log_ratios(v);
        let mut row = vec![0.0; v];
        for (j, rj) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for a in 0..v {
                let delta = if a == j { 1.0 } else { 0.0 };
                acc += p[a] * (delta - p[j]) * w[a];
            }
            *rj = -coef * acc;
        }
        grad.add(&s, 1.0, &row);
    }
    Ok(grad)
}

/// Q-argmax KD: `L_SFT(x, y) + (γ/|ŷ|) Σ_t CE(onehot(argmax_a A(s_t, a)), π_θ(·|s_t))`.
pub fn q_argmax_kd_loss(
    student: &TabularPolicy,
    view: &AdvantageView<'_>,
    x: &[Token],
    y: &[Token],
    y_hat: &[Token],
    gamma: f64,
) -> Result<(f64, GradientAccumulator)> {
    nonempty(y_hat, "generated response")?;
    let (mut loss, mut grad) = sft_loss_and_grad(student, x, y)?;
    let coef = gamma / y_hat.len() as f64;
    for s in prefix_states(x, y_hat) {
        let target = view.row(&s)?.argmax();
        let logp = student.log_probs(&s);
        loss -= coef * logp[target];
        add_nll_grad(&mut grad, &s, &probs_from_log(&logp), target, coef);
    }
    Ok((loss, grad))
}

/// Target distribution `softmax(A(s, ·))` over the tokens present in the row.
pub fn advantage_softmax(row: &AdvantageRow, beta: f64, vocab_size: usize) -> Vec<f64> {
    let scaled: Vec<f64> = row.entries.iter().map(|&(_, w)| beta * w).collect();
    let probs = softmax(&scaled);
    let mut out = vec![0.0; vocab_size];
    for (&(t, _), p) in row.entries.iter().zip(probs) {
        out[t] = p;
    }
    out
}

/// Q-softmax KD: `L_SFT(x, y) + (γ/|ŷ|) Σ_t D_KL(softmax(A(s_t, ·)) ‖ π_θ(·|s_t))`.
pub fn q_softmax_kd_loss(
    student: &TabularPolicy,
    view: &AdvantageView<'_>,
    x: &[Token],
    y: &[Token],
    y_hat: &[Token],
    gamma: f64,
) -> Result<(f64, GradientAccumulator)> {
    nonempty(y_hat, "generated response")?;
    let (mut loss, mut grad) = sft_loss_and_grad(student, x, y)?;
    let coef = gamma / y_hat.len() as f64;
    let v = student.vocab_size();
    for s in prefix_states(x, y_hat) {
        let q = advantage_softmax(&view.row(&s)?, view.beta(), v);
        let logp = student.log_probs(&s);
        loss += coef * kl_from_log(&q, &logp);
        let p = probs_from_log(&logp);
        let diff: Vec<f64> = p.iter().zip(&q).map(|(pi, qi)| pi - qi).collect();
        grad.add(&s, coef, &diff);
    }
    Ok((loss, grad))
}

/// Expected log-ratio `Σ_a π_θ(a|s) w(s, a)` at one state (the quantity ADPA maximizes).
pub fn expected_log_ratio(
    student: &TabularPolicy,
    view: &AdvantageView<'_>,
    state: &State,
) -> Result<f64> {
    let p = student.action_distribution(state);
    let w = view.row(state)?.dense_log_ratios(student.vocab_size());
    Ok(p.iter().zip(&w).map(|(a, b)| a * b).sum())
}
