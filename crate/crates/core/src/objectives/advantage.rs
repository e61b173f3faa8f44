use crate::error::Result;
use crate::mdp::{State, Token};
use crate::pipeline::cache::TopKAdvantageCache;
use crate::policy::TabularPolicy;

/// Per-state log-ratios `log π_dpo(a|s) − log π_ref(a|s)` (the advantage divided
/// by β), sorted by token. Exact views list every token; cached views list only
/// the tokens kept by the top-k rule.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageRow {
    pub entries: Vec<(Token, f64)>,
}

impl AdvantageRow {
    /// Log-ratios as a dense vector; tokens absent from the row carry 0.
    pub fn dense_log_ratios(&self, vocab_size: usize) -> Vec<f64> {
        let mut out = vec![0.0; vocab_size];
        for &(t, w) in &self.entries {
            out[t] = w;
        }
        out
    }

    /// Token with the largest value; ties go to the lower token index.
    pub fn argmax(&self) -> Token {
        let mut best = self.entries[0];
        for &(t, w) in &self.entries[1..] {
            if w > best.1 {
                best = (t, w);
            }
        }
        best.0
    }
}

/// Source of `A(s, ·) = β · log(π_dpo/π_ref)`.
#[derive(Debug, Clone, Copy)]
pub enum AdvantageView<'a> {
    Exact {
        dpo: &'a TabularPolicy,
        reference: &'a TabularPolicy,
        beta: f64,
    },
    /// Ablation without the reference teacher: the log-ratio is replaced by
    /// `log π_dpo`.
    DpoOnly { dpo: &'a TabularPolicy, beta: f64 },
    Cached {
        cache: &'a TopKAdvantageCache,
        beta: f64,
    },
}

impl<'a> AdvantageView<'a> {
    pub fn exact(dpo: &'a TabularPolicy, reference: &'a TabularPolicy, beta: f64) -> Self {
        AdvantageView::Exact {
            dpo,
            reference,
            beta,
        }
    }

    pub fn beta(&self) -> f64 {
        match *self {
            AdvantageView::Exact { beta, .. }
            | AdvantageView::DpoOnly { beta, .. }
            | AdvantageView::Cached { beta, .. } => beta,
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            AdvantageView::Exact { dpo, .. } | AdvantageView::DpoOnly { dpo, .. } => {
                dpo.vocab_size()
            }
            AdvantageView::Cached { cache, .. } => cache.vocab_size(),
        }
    }

    pub fn row(&self, state: &State) -> Result<AdvantageRow> {
        match self {
            AdvantageView::Exact { dpo, reference, .. } => {
                let d = dpo.log_probs(state);
                let r = reference.log_probs(state);
                Ok(AdvantageRow {
                    entries: d.iter().zip(&r).map(|(a, b)| a - b).enumerate().collect(),
                })
            }
            AdvantageView::DpoOnly { dpo, .. } => Ok(AdvantageRow {
                entries: dpo.log_probs(state).into_iter().enumerate().collect(),
            }),
            AdvantageView::Cached { cache, .. } => cache.row(state),
        }
    }
}

/// `β · log(π_dpo(a|s)/π_ref(a|s))` for every action. Tokens a cache omits
/// are reported as 0.
pub fn advantage(view: &AdvantageView<'_>, state: &State) -> Result<Vec<f64>> {
    let beta = view.beta();
    let row = view.row(state)?;
    Ok(row
        .dense_log_ratios(view.vocab_size())
        .into_iter()
        .map(|w| beta * w)
        .collect())
}
