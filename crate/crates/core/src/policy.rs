//! Tabular softmax policies: one logit vector per state.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_json, sha256_hex, write_atomic};
use crate::math::{log_softmax, softmax};
use crate::mdp::{prefix_states, State, Token, TokenMdp, Trajectory};

pub const POLICY_FORMAT: &str = "ALIGNLAB-POLICY-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyRole {
    Student,
    ReferenceTeacher,
    DpoTeacher,
    StudentReference,
}

/// `π(a | s) = softmax(logits[s])`. States without an entry are uniform.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    vocab_size: usize,
    role: PolicyRole,
    logits: BTreeMap<State, Vec<f64>>,
}

impl TabularPolicy {
    pub fn uniform(vocab_size: usize, role: PolicyRole) -> Self {
        TabularPolicy {
            vocab_size,
            role,
            logits: BTreeMap::new(),
        }
    }

    pub fn from_logits(
        vocab_size: usize,
        role: PolicyRole,
        logits: BTreeMap<State, Vec<f64>>,
    ) -> Result<Self> {
        for (s, row) in &logits {
            if row.len() != vocab_size {
                return Err(Error::precondition(format!(
                    "logit row for {s} has length {}, expected {vocab_size}",
                    row.len()
                )));
            }
            if row.iter().any(|z| !z.is_finite()) {
                return Err(Error::precondition(format!("non-finite logit at {s}")));
            }
        }
        Ok(TabularPolicy {
            vocab_size,
            role,
            logits,
        })
    }

    /// Logits drawn i.i.d. uniform on `[-scale, scale]` at every reachable state.
    pub fn random<R: Rng>(
        mdp: &TokenMdp,
        role: PolicyRole,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut logits = BTreeMap::new();
        for s in mdp.all_states()? {
            let row = (0..mdp.vocab_size)
                .map(|_| scale * (2.0 * rng.random::<f64>() - 1.0))
                .collect();
            logits.insert(s, row);
        }
        Ok(TabularPolicy {
            vocab_size: mdp.vocab_size,
            role,
            logits,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn role(&self) -> PolicyRole {
        self.role
    }

    /// Deep copy under a new role tag.
    pub fn with_role(&self, role: PolicyRole) -> Self {
        TabularPolicy {
            role,
            ..self.clone()
        }
    }

    pub fn logits(&self, state: &State) -> Option<&[f64]> {
        self.logits.get(state).map(Vec::as_slice)
    }

    /// Mutable logits; an unseen state materializes as zeros (uniform).
    pub fn logits_mut(&mut self, state: &State) -> &mut Vec<f64> {
        let v = self.vocab_size;
        self.logits
            .entry(state.clone())
            .or_insert_with(|| vec![0.0; v])
    }

    pub fn states(&self) -> impl Iterator<Item = &State> {
        self.logits.keys()
    }

    pub fn table(&self) -> &BTreeMap<State, Vec<f64>> {
        &self.logits
    }

    pub fn log_probs(&self, state: &State) -> Vec<f64> {
        match self.logits.get(state) {
            Some(row) => log_softmax(row),
            None => vec![-(self.vocab_size as f64).ln(); self.vocab_size],
        }
    }

    pub fn action_distribution(&self, state: &State) -> Vec<f64> {
        match self.logits.get(state) {
            Some(row) => softmax(row),
            None => vec![1.0 / self.vocab_size as f64; self.vocab_size],
        }
    }

    pub fn log_prob(&self, state: &State, action: Token) -> f64 {
        self.log_probs(state)[action]
    }

    /// `Σ_t log π(y_t | x, y_<t)`.
    pub fn response_logprob(&self, x: &[Token], y: &[Token]) -> f64 {
        prefix_states(x, y)
            .zip(y)
            .map(|(s, &a)| self.log_prob(&s, a))
            .sum()
    }

    /// Log-probability of continuing from `state` with `continuation`.
    pub fn response_logprob_from(&self, state: &State, continuation: &[Token]) -> f64 {
        let mut generated = state.generated.clone();
        let mut total = 0.0;
        for &a in continuation {
            total += self.log_prob(&State::new(&state.prompt, &generated), a);
            generated.push(a);
        }
        total
    }

    pub fn trajectory_logprob(&self, traj: &Trajectory) -> f64 {
        self.response_logprob(&traj.prompt, &traj.actions)
    }

    /// Ancestral sampling from `(prompt, "")` until EOS or the horizon.
    pub fn sample_response<R: Rng>(
        &self,
        mdp: &TokenMdp,
        prompt: &[Token],
        rng: &mut R,
    ) -> Trajectory {
        let mut state = mdp.initial_state(prompt);
        while !state.terminal {
            let probs = self.action_distribution(&state);
            let action = sample_index(&probs, rng);
            state = mdp
                .transition(&state, action)
                .expect("sampled action is in vocabulary and state is live");
        }
        Trajectory {
            prompt: prompt.to_vec(),
            actions: state.generated,
            terminal: true,
        }
    }

    /// Most likely response under step-wise greedy decoding.
    pub fn greedy_response(&self, mdp: &TokenMdp, prompt: &[Token]) -> Trajectory {
        let mut state = mdp.initial_state(prompt);
        while !state.terminal {
            let a = crate::math::argmax(&self.log_probs(&state));
            state = mdp.transition(&state, a).expect("live state");
        }
        Trajectory {
            prompt: prompt.to_vec(),
            actions: state.generated,
            terminal: true,
        }
    }

    /// `θ ← θ − lr · g`.
    pub fn apply_gradient(&mut self, grad: &GradientAccumulator, lr: f64) {
        for (s, g) in grad.iter() {
            let row = self.logits_mut(s);
            for (z, gi) in row.iter_mut().zip(g) {
                *z -= lr * gi;
            }
        }
    }

    fn checkpoint_body(&self, task_hash: &str) -> CheckpointBody {
        CheckpointBody {
            role: self.role,
            vocab_size: self.vocab_size,
            task_hash: task_hash.to_string(),
            logits: self
                .logits
                .iter()
                .map(|(s, row)| LogitRow {
                    prompt: s.prompt.clone(),
                    generated: s.generated.clone(),
                    logits: row.clone(),
                })
                .collect(),
        }
    }

    /// SHA-256 of the logit table (role, vocabulary and rows).
    pub fn content_hash(&self) -> String {
        let body = self.checkpoint_body("");
        sha256_hex(&serde_json::to_vec(&body).expect("policy serializes"))
    }

    pub fn save(&self, path: &Path, task_hash: &str) -> Result<String> {
        let body = self.checkpoint_body(task_hash);
        let hash = sha256_hex(&serde_json::to_vec(&body)?);
        let file = Checkpoint {
            format: POLICY_FORMAT.to_string(),
            content_hash: hash.clone(),
            body,
        };
        let mut bytes = serde_json::to_vec_pretty(&file)?;
        bytes.push(b'\n');
        write_atomic(path, &bytes)?;
        Ok(hash)
    }

    /// Loads a checkpoint and returns it with the task hash it was trained on.
    pub fn load(path: &Path) -> Result<(TabularPolicy, String)> {
        let file: Checkpoint = read_json(path)?;
        if file.format != POLICY_FORMAT {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("expected format {POLICY_FORMAT}, found {}", file.format),
            });
        }
        let found = sha256_hex(&serde_json::to_vec(&file.body)?);
        if found != file.content_hash {
            return Err(Error::Integrity {
                what: format!("policy checkpoint {}", path.display()),
                expected: file.content_hash,
                found,
            });
        }
        let body = file.body;
        let logits = body
            .logits
            .into_iter()
            .map(|r| (State::new(&r.prompt, &r.generated), r.logits))
            .collect();
        let policy = TabularPolicy::from_logits(body.vocab_size, body.role, logits)?;
        Ok((policy, body.task_hash))
    }
}

/// Inverse-CDF draw from a probability vector.
pub fn sample_index<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LogitRow {
    prompt: Vec<Token>,
    generated: Vec<Token>,
    logits: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointBody {
    role: PolicyRole,
    vocab_size: usize,
    task_hash: String,
    logits: Vec<LogitRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    content_hash: String,
    #[serde(flatten)]
    body: CheckpointBody,
}

/// `∂loss/∂logits`, keyed by the states the loss visited.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientAccumulator {
    grads: BTreeMap<State, Vec<f64>>,
    vocab_size: usize,
}

impl GradientAccumulator {
    pub fn new(vocab_size: usize) -> Self {
        GradientAccumulator {
            grads: BTreeMap::new(),
            vocab_size,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// `g[state] += coef · row`.
    pub fn add(&mut self, state: &State, coef: f64, row: &[f64]) {
        let v = self.vocab_size;
        let entry = self
            .grads
            .entry(state.clone())
            .or_insert_with(|| vec![0.0; v]);
        for (g, r) in entry.iter_mut().zip(row) {
            *g += coef * r;
        }
    }

    pub fn add_at(&mut self, state: &State, action: Token, value: f64) {
        let v = self.vocab_size;
        self.grads
            .entry(state.clone())
            .or_insert_with(|| vec![0.0; v])[action] += value;
    }

    /// Touches `state` so it appears with a zero row.
    pub fn touch(&mut self, state: &State) {
        let v = self.vocab_size;
        self.grads
            .entry(state.clone())
            .or_insert_with(|| vec![0.0; v]);
    }

    pub fn merge(&mut self, other: &GradientAccumulator, coef: f64) {
        for (s, row) in &other.grads {
            self.add(s, coef, row);
        }
    }

    pub fn scale(&mut self, coef: f64) {
        for row in self.grads.values_mut() {
            for g in row {
                *g *= coef;
            }
        }
    }

    pub fn get(&self, state: &State) -> Option<&[f64]> {
        self.grads.get(state).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&State, &Vec<f64>)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.grads
            .values()
            .flatten()
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs_diff(&self, other: &GradientAccumulator) -> f64 {
        let mut worst: f64 = 0.0;
        let zero = vec![0.0; self.vocab_size.max(other.vocab_size)];
        for s in self.grads.keys().chain(other.grads.keys()) {
            let a = self.get(s).unwrap_or(&zero);
            let b = other.get(s).unwrap_or(&zero);
            for (x, y) in a.iter().zip(b) {
                worst = worst.max((x - y).abs());
            }
        }
        worst
    }

    pub fn is_finite(&self) -> bool {
        self.grads.values().flatten().all(|g| g.is_finite())
    }
}

/// Softmax cross-entropy gradient `p − e_target` added with weight `coef`.
pub(crate) fn add_nll_grad(
    grad: &mut GradientAccumulator,
    state: &State,
    probs: &[f64],
    target: Token,
    coef: f64,
) {
    grad.add(state, coef, probs);
    grad.add_at(state, target, -coef);
}

/// `L_SFT = −(1/|y|) Σ_t log π(y_t | x, y_<t)` and its exact gradient.
pub fn sft_loss_and_grad(
    policy: &TabularPolicy,
    x: &[Token],
    y: &[Token],
) -> Result<(f64, GradientAccumulator)> {
    if y.is_empty() {
        return Err(Error::precondition("SFT target response is empty"));
    }
    let norm = 1.0 / y.len() as f64;
    let mut loss = 0.0;
    let mut grad = GradientAccumulator::new(policy.vocab_size());
    for (s, &a) in prefix_states(x, y).zip(y) {
        let logp = policy.log_probs(&s);
        loss -= norm * logp[a];
        let probs: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
        add_nll_grad(&mut grad, &s, &probs, a, norm);
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    /// Plain gradient descent.
    Sgd { lr: f64 },
    /// Adam with optional global gradient-norm clipping and no weight decay.
    Adam {
        lr: f64,
        #[serde(default = "adam_beta1")]
        beta1: f64,
        #[serde(default = "adam_beta2")]
        beta2: f64,
        #[serde(default = "adam_eps")]
        eps: f64,
        #[serde(default)]
        clip_norm: Option<f64>,
    },
}

fn adam_beta1() -> f64 {
    0.9
}
fn adam_beta2() -> f64 {
    0.999
}
fn adam_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr } | OptimizerConfig::Adam { lr, .. } => lr,
        }
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        let lr = self.lr();
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::config(format!("{path}.lr"), "must be positive"));
        }
        Ok(())
    }
}

/// Optimizer with its per-state moment buffers.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    step: u64,
    first: BTreeMap<State, Vec<f64>>,
    second: BTreeMap<State, Vec<f64>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Optimizer {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, policy: &mut TabularPolicy, grad: &GradientAccumulator) {
        self.step += 1;
        match self.config {
            OptimizerConfig::Sgd { lr } => policy.apply_gradient(grad, lr),
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
                clip_norm,
            } => {
                let clip = match clip_norm {
                    Some(c) => {
                        let n = grad.norm();
                        if n > c {
                            c / n
                        } else {
                            1.0
                        }
                    }
                    None => 1.0,
                };
                let t = self.step as i32;
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                let v = policy.vocab_size();
                for (s, g) in grad.iter() {
                    let m = self.first.entry(s.clone()).or_insert_with(|| vec![0.0; v]);
                    let u = self.second.entry(s.clone()).or_insert_with(|| vec![0.0; v]);
                    let row = policy.logits_mut(s);
                    for i in 0..v {
                        let gi = clip * g[i];
                        m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                        u[i] = beta2 * u[i] + (1.0 - beta2) * gi * gi;
                        let mhat = m[i] / bc1;
                        let uhat = u[i] / bc2;
                        row[i] -= lr * mhat / (uhat.sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn mdp() -> TokenMdp {
        TokenMdp::new(4, 0, 3, vec![vec![1], vec![2, 3]]).unwrap()
    }

    #[test]
    fn uniform_distribution() {
        let p = TabularPolicy::uniform(4, PolicyRole::Student);
        let d = p.action_distribution(&State::new(&[1], &[]));
        assert_eq!(d, vec![0.25; 4]);
    }

    #[test]
    fn two_action_softmax_by_hand() {
        let s = State::new(&[1], &[]);
        let mut logits = BTreeMap::new();
        logits.insert(s.clone(), vec![1.0, 0.0]);
        let p = TabularPolicy::from_logits(2, PolicyRole::Student, logits).unwrap();
        let d = p.action_distribution(&s);
        let e = std::f64::consts::E;
        assert!((d[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((d[0] - 0.7311).abs() < 1e-4);
        assert!((d[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn shift_invariance() {
        let m = mdp();
        let mut rng = seed::stream(3, "t");
        let p = TabularPolicy::random(&m, PolicyRole::Student, 2.0, &mut rng).unwrap();
        let mut q = p.clone();
        for (i, s) in m.all_states().unwrap().iter().enumerate() {
            for z in q.logits_mut(s).iter_mut() {
                *z += i as f64 * 0.37 - 3.0;
            }
        }
        let y = [3, 2, 0];
        assert!((p.response_logprob(&[1], &y) - q.response_logprob(&[1], &y)).abs() < 1e-10);
        let (lp, _) = sft_loss_and_grad(&p, &[1], &y).unwrap();
        let (lq, _) = sft_loss_and_grad(&q, &[1], &y).unwrap();
        assert!((lp - lq).abs() < 1e-10);
    }

    #[test]
    fn uniform_logprob_of_three_actions() {
        let p = TabularPolicy::uniform(4, PolicyRole::Student);
        let lp = p.response_logprob(&[1], &[1, 2, 3]);
        assert!((lp - 3.0 * 0.25f64.ln()).abs() < 1e-12);
        assert!((lp + 4.15888).abs() < 1e-5);
        assert_eq!(p.response_logprob(&[1], &[]), 0.0);
    }

    #[test]
    fn near_one_hot_logprob_approaches_zero() {
        let mut p = TabularPolicy::uniform(3, PolicyRole::Student);
        p.logits_mut(&State::new(&[1], &[]))[2] = 40.0;
        p.logits_mut(&State::new(&[1], &[2]))[0] = 40.0;
        let lp = p.response_logprob(&[1], &[2, 0]);
        assert!(lp <= 0.0 && lp > -1e-15);
    }

    #[test]
    fn logprobs_sum_to_one_over_enumeration() {
        let m = mdp();
        let mut rng = seed::stream(11, "t");
        let p = TabularPolicy::random(&m, PolicyRole::Student, 3.0, &mut rng).unwrap();
        for prompt in &m.prompts {
            let total: f64 = m
                .enumerate_trajectories(prompt)
                .unwrap()
                .iter()
                .map(|t| p.trajectory_logprob(t).exp())
                .sum();
            assert!((total - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn eos_forcing_policy_samples_single_step() {
        let m = mdp();
        let mut p = TabularPolicy::uniform(4, PolicyRole::Student);
        p.logits_mut(&m.initial_state(&[1]))[0] = 1e6;
        let mut rng = seed::stream(0, "t");
        let t = p.sample_response(&m, &[1], &mut rng);
        assert_eq!(t.actions, vec![0]);
        assert!(t.terminal);
    }

    #[test]
    fn sampling_is_seeded() {
        let m = mdp();
        let p = TabularPolicy::uniform(4, PolicyRole::Student);
        let a = p.sample_response(&m, &[1], &mut seed::stream(5, "s"));
        let b = p.sample_response(&m, &[1], &mut seed::stream(5, "s"));
        assert_eq!(a, b);
    }

    #[test]
    fn sft_uniform_loss_is_log_vocab() {
        let p = TabularPolicy::uniform(4, PolicyRole::Student);
        let (l, _) = sft_loss_and_grad(&p, &[1], &[2, 3, 0]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert!((l - 1.38629).abs() < 1e-5);
    }

    #[test]
    fn sft_one_hot_loss_vanishes() {
        let mut p = TabularPolicy::uniform(4, PolicyRole::Student);
        p.logits_mut(&State::new(&[1], &[]))[2] = 40.0;
        p.logits_mut(&State::new(&[1], &[2]))[0] = 40.0;
        let (l, _) = sft_loss_and_grad(&p, &[1], &[2, 0]).unwrap();
        assert!(l <= 1e-9);
    }

    #[test]
    fn sft_rejects_empty_target() {
        let p = TabularPolicy::uniform(4, PolicyRole::Student);
        assert!(matches!(
            sft_loss_and_grad(&p, &[1], &[]),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn checkpoint_roundtrip_and_integrity() {
        let m = mdp();
        let mut rng = seed::stream(1, "t");
        let p = TabularPolicy::random(&m, PolicyRole::DpoTeacher, 1.0, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        p.save(&path, "abc").unwrap();
        let (q, task_hash) = TabularPolicy::load(&path).unwrap();
        assert_eq!(p, q);
        assert_eq!(task_hash, "abc");
        assert_eq!(p.content_hash(), q.content_hash());

        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, text.replacen("dpo-teacher", "student", 1)).unwrap();
        assert!(matches!(
            TabularPolicy::load(&path),
            Err(Error::Integrity { .. })
        ));
    }

    #[test]
    fn adam_moves_against_gradient() {
        let s = State::new(&[1], &[]);
        let mut p = TabularPolicy::uniform(3, PolicyRole::Student);
        let mut g = GradientAccumulator::new(3);
        g.add(&s, 1.0, &[1.0, -1.0, 0.0]);
        let mut opt = Optimizer::new(OptimizerConfig::Adam {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        });
        opt.step(&mut p, &g);
        let z = p.logits(&s).unwrap();
        assert!((z[0] + 0.1).abs() < 1e-6);
        assert!((z[1] - 0.1).abs() < 1e-6);
        assert_eq!(z[2], 0.0);
    }
}
