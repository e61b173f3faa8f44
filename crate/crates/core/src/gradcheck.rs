//! Central finite-difference harness for the analytic logit gradients.

use std::collections::BTreeSet;

use crate::policy::{GradientAccumulator, TabularPolicy};

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// `‖g_analytic − g_numeric‖₂ / (‖g_analytic‖₂ + ‖g_numeric‖₂)`; the absolute
    /// difference norm when both gradients vanish.
    pub relative_error: f64,
    pub max_abs_error: f64,
    pub entries: usize,
}

/// Numerical gradient of `loss` with respect to every logit of the listed states.
pub fn numeric_gradient<F>(
    policy: &TabularPolicy,
    states: &BTreeSet<crate::mdp::State>,
    loss: F,
    step: f64,
) -> GradientAccumulator
where
    F: Fn(&TabularPolicy) -> f64,
{
    let v = policy.vocab_size();
    let mut probe = policy.clone();
    let mut out = GradientAccumulator::new(v);
    for s in states {
        for i in 0..v {
            let orig = probe.logits_mut(s)[i];
            probe.logits_mut(s)[i] = orig + step;
            let plus = loss(&probe);
            probe.logits_mut(s)[i] = orig - step;
            let minus = loss(&probe);
            probe.logits_mut(s)[i] = orig;
            out.add_at(s, i, (plus - minus) / (2.0 * step));
        }
    }
    out
}

/// Compares `analytic` against central differences over every state in either
/// the gradient or the policy table.
pub fn check_gradient<F>(
    policy: &TabularPolicy,
    analytic: &GradientAccumulator,
    loss: F,
    step: f64,
) -> GradCheckReport
where
    F: Fn(&TabularPolicy) -> f64,
{
    let states: BTreeSet<_> = analytic
        .iter()
        .map(|(s, _)| s.clone())
        .chain(policy.states().cloned())
        .collect();
    let numeric = numeric_gradient(policy, &states, loss, step);
    compare(analytic, &numeric)
}

pub fn compare(analytic: &GradientAccumulator, numeric: &GradientAccumulator) -> GradCheckReport {
    let v = analytic.vocab_size().max(numeric.vocab_size());
    let zero = vec![0.0; v];
    let states: BTreeSet<_> = analytic
        .iter()
        .map(|(s, _)| s)
        .chain(numeric.iter().map(|(s, _)| s))
        .collect();
    let (mut diff2, mut a2, mut n2, mut max_abs) = (0.0, 0.0, 0.0, 0.0f64);
    let mut entries = 0;
    for s in states {
        let a = analytic.get(s).unwrap_or(&zero);
        let n = numeric.get(s).unwrap_or(&zero);
        for (x, y) in a.iter().zip(n) {
            diff2 += (x - y) * (x - y);
            a2 += x * x;
            n2 += y * y;
            max_abs = max_abs.max((x - y).abs());
            entries += 1;
        }
    }
    let denom = a2.sqrt() + n2.sqrt();
    let relative_error = if denom < 1e-10 {
        diff2.sqrt()
    } else {
        diff2.sqrt() / denom
    };
    GradCheckReport {
        relative_error,
        max_abs_error: max_abs,
        entries,
    }
}
