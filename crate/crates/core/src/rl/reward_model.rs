use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{neg_log_sigmoid, sigmoid};
use crate::mdp::Token;
use crate::pipeline::data::PreferenceTriple;

/// Features of a response for the linear sequence reward model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureMap {
    /// No features; every response scores 0.
    Empty,
    /// `[|y|, count(token 0), …, count(token V−1)]`.
    LengthAndCounts { vocab_size: usize },
}

impl FeatureMap {
    pub fn dim(&self) -> usize {
        match *self {
            FeatureMap::Empty => 0,
            FeatureMap::LengthAndCounts { vocab_size } => vocab_size + 1,
        }
    }

    pub fn features(&self, _x: &[Token], y: &[Token]) -> Vec<f64> {
        match *self {
            FeatureMap::Empty => Vec::new(),
            FeatureMap::LengthAndCounts { vocab_size } => {
                let mut f = vec![0.0; vocab_size + 1];
                f[0] = y.len() as f64;
                for &t in y {
                    f[t + 1] += 1.0;
                }
                f
            }
        }
    }
}

/// `RM_φ(x, y) = φ · features(x, y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceRewardModel {
    pub features: FeatureMap,
    pub weights: Vec<f64>,
    pub reg: f64,
}

impl SequenceRewardModel {
    pub fn score(&self, x: &[Token], y: &[Token]) -> f64 {
        self.features
            .features(x, y)
            .iter()
            .zip(&self.weights)
            .map(|(f, w)| f * w)
            .sum()
    }

    /// Mean Bradley–Terry loss plus `reg/2 ‖φ‖²`, and its gradient.
    pub fn loss_and_grad(&self, data: &[PreferenceTriple]) -> (f64, Vec<f64>) {
        let n = data.len() as f64;
        let mut loss = 0.5 * self.reg * self.weights.iter().map(|w| w * w).sum::<f64>();
        let mut grad: Vec<f64> = self.weights.iter().map(|w| self.reg * w).collect();
        for t in data {
            let fw = self.features.features(&t.prompt, &t.preferred);
            let fl = self.features.features(&t.prompt, &t.dispreferred);
            let diff: Vec<f64> = fw.iter().zip(&fl).map(|(a, b)| a - b).collect();
            let margin: f64 = diff.iter().zip(&self.weights).map(|(d, w)| d * w).sum();
            loss += neg_log_sigmoid(margin) / n;
            let coef = -sigmoid(-margin) / n;
            for (g, d) in grad.iter_mut().zip(&diff) {
                *g += coef * d;
            }
        }
        (loss, grad)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardModelFit {
    pub model: SequenceRewardModel,
    pub loss_trace: Vec<f64>,
    pub converged: bool,
}

/// Full-batch gradient descent on the pairwise loss until the gradient norm
/// drops below `1e-6` or `max_steps` is reached.
pub fn bt_rm_fit(
    data: &[PreferenceTriple],
    features: FeatureMap,
    reg: f64,
    lr: f64,
    max_steps: usize,
) -> Result<RewardModelFit> {
    if data.is_empty() {
        return Err(Error::precondition("reward model needs at least one pair"));
    }
    let mut model = SequenceRewardModel {
        features,
        weights: vec![0.0; features.dim()],
        reg,
    };
    let mut loss_trace = Vec::new();
    for step in 0..max_steps {
        let (loss, grad) = model.loss_and_grad(data);
        if !loss.is_finite() {
            return Err(Error::Divergence {
                phase: "reward-model".into(),
                step,
            });
        }
        loss_trace.push(loss);
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm < 1e-6 {
            return Ok(RewardModelFit {
                model,
                loss_trace,
                converged: true,
            });
        }
        for (w, g) in model.weights.iter_mut().zip(&grad) {
            *w -= lr * g;
        }
    }
    Ok(RewardModelFit {
        model,
        loss_trace,
        converged: false,
    })
}
