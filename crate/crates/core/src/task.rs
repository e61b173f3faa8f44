//! Synthetic benchmark tasks: config schema, generator, and the versioned task file.

use std::collections::BTreeSet;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_json, sha256_hex, write_atomic};
use crate::mdp::{GroundTruthReward, State, Token, TokenMdp, DEFAULT_ENUMERATION_BUDGET};
use crate::seed;

pub const TASK_FORMAT: &str = "ALIGNLAB-TASK-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RewardSpec {
    /// i.i.d. uniform on `[-scale, scale]`.
    Uniform { scale: f64 },
    /// i.i.d. normal with mean 0.
    Normal { std: f64 },
}

impl Default for RewardSpec {
    fn default() -> Self {
        RewardSpec::Uniform { scale: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub vocab_size: usize,
    #[serde(default)]
    pub eos_id: Token,
    pub horizon: usize,
    /// Explicit prompts; when absent `num_prompts` prompts of `prompt_len`
    /// non-EOS tokens are drawn from the seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompts: Option<Vec<Vec<Token>>>,
    #[serde(default = "default_num_prompts")]
    pub num_prompts: usize,
    #[serde(default = "default_prompt_len")]
    pub prompt_len: usize,
    #[serde(default)]
    pub reward: RewardSpec,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_budget")]
    pub enumeration_budget: u64,
}

fn default_num_prompts() -> usize {
    4
}

fn default_prompt_len() -> usize {
    2
}

fn default_budget() -> u64 {
    DEFAULT_ENUMERATION_BUDGET
}

impl TaskConfig {
    pub fn new(vocab_size: usize, horizon: usize) -> Self {
        TaskConfig {
            vocab_size,
            eos_id: 0,
            horizon,
            prompts: None,
            num_prompts: default_num_prompts(),
            prompt_len: default_prompt_len(),
            reward: RewardSpec::default(),
            seed: 0,
            enumeration_budget: DEFAULT_ENUMERATION_BUDGET,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::config(
                "vocab_size",
                "must be at least 2: with EOS alone no preference pair has two distinct responses",
            ));
        }
        if self.eos_id >= self.vocab_size {
            return Err(Error::config("eos_id", "must be below vocab_size"));
        }
        if self.horizon == 0 {
            return Err(Error::config("horizon", "must be at least 1"));
        }
        match &self.reward {
            RewardSpec::Uniform { scale } if !(scale.is_finite() && *scale >= 0.0) => {
                return Err(Error::config(
                    "reward.scale",
                    "must be finite and non-negative",
                ));
            }
            RewardSpec::Normal { std } if !(std.is_finite() && *std >= 0.0) => {
                return Err(Error::config(
                    "reward.std",
                    "must be finite and non-negative",
                ));
            }
            _ => {}
        }
        match &self.prompts {
            Some(prompts) => {
                if prompts.is_empty() {
                    return Err(Error::config("prompts", "must not be empty"));
                }
                let distinct: BTreeSet<_> = prompts.iter().collect();
                if distinct.len() != prompts.len() {
                    return Err(Error::config("prompts", "prompts must be distinct"));
                }
                for (i, p) in prompts.iter().enumerate() {
                    if p.iter().any(|&t| t >= self.vocab_size) {
                        return Err(Error::config(
                            format!("prompts[{i}]"),
                            "token outside vocabulary",
                        ));
                    }
                }
            }
            None => {
                if self.num_prompts == 0 {
                    return Err(Error::config("num_prompts", "must be at least 1"));
                }
                let capacity = ((self.vocab_size - 1) as f64).powi(self.prompt_len as i32);
                if (self.num_prompts as f64) > capacity {
                    return Err(Error::config(
                        "num_prompts",
                        format!(
                            "cannot draw {} distinct prompts of length {}",
                            self.num_prompts, self.prompt_len
                        ),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// An MDP together with its ground-truth reward.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub config: TaskConfig,
    pub mdp: TokenMdp,
    pub reward: GroundTruthReward,
}

/// Draws a task deterministically from `seed` (overriding `cfg.seed`).
pub fn synth_task(seed: u64, cfg: &TaskConfig) -> Result<Task> {
    cfg.validate()?;
    let mut cfg = cfg.clone();
    cfg.seed = seed;

    let prompts = match &cfg.prompts {
        Some(p) => p.clone(),
        None => draw_prompts(&cfg),
    };
    let mdp = TokenMdp::new(cfg.vocab_size, cfg.eos_id, cfg.horizon, prompts)?
        .with_budget(cfg.enumeration_budget);

    let mut rng = seed::stream(seed, "reward-table");
    let mut reward = GroundTruthReward::default();
    let normal = match cfg.reward {
        RewardSpec::Normal { std } if std > 0.0 => Some(Normal::new(0.0, std).expect("std > 0")),
        _ => None,
    };
    for state in mdp.all_states()? {
        let row: Vec<f64> = (0..mdp.vocab_size)
            .map(|_| match cfg.reward {
                RewardSpec::Uniform { scale } => {
                    let u: f64 = rng.random();
                    scale * (2.0 * u - 1.0)
                }
                RewardSpec::Normal { .. } => normal.map_or(0.0, |n| n.sample(&mut rng)),
            })
            .collect();
        reward.table.insert(state, row);
    }
    Ok(Task {
        config: cfg,
        mdp,
        reward,
    })
}

fn draw_prompts(cfg: &TaskConfig) -> Vec<Vec<Token>> {
    let mut rng = seed::stream(cfg.seed, "prompts");
    let non_eos: Vec<Token> = (0..cfg.vocab_size).filter(|&t| t != cfg.eos_id).collect();
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(cfg.num_prompts);
    while out.len() < cfg.num_prompts {
        let p: Vec<Token> = (0..cfg.prompt_len)
            .map(|_| non_eos[rng.random_range(0..non_eos.len())])
            .collect();
        if seen.insert(p.clone()) {
            out.push(p);
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RewardRow {
    prompt: Vec<Token>,
    generated: Vec<Token>,
    values: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TaskBody {
    config: TaskConfig,
    mdp: TokenMdp,
    reward: Vec<RewardRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TaskFile {
    format: String,
    hash: String,
    #[serde(flatten)]
    body: TaskBody,
}

impl Task {
    fn body(&self) -> TaskBody {
        TaskBody {
            config: self.config.clone(),
            mdp: self.mdp.clone(),
            reward: self
                .reward
                .table
                .iter()
                .map(|(s, v)| RewardRow {
                    prompt: s.prompt.clone(),
                    generated: s.generated.clone(),
                    values: v.clone(),
                })
                .collect(),
        }
    }

    /// SHA-256 of the canonical compact JSON of the task contents.
    pub fn hash(&self) -> String {
        body_hash(&self.body())
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let body = self.body();
        let file = TaskFile {
            format: TASK_FORMAT.to_string(),
            hash: body_hash(&body),
            body,
        };
        let mut bytes = serde_json::to_vec_pretty(&file)?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        write_atomic(path, &self.to_json()?)?;
        Ok(self.hash())
    }

    pub fn load(path: &Path) -> Result<Task> {
        let file: TaskFile = read_json(path)?;
        if file.format != TASK_FORMAT {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("expected format {TASK_FORMAT}, found {}", file.format),
            });
        }
        let found = body_hash(&file.body);
        if found != file.hash {
            return Err(Error::Integrity {
                what: format!("task file {}", path.display()),
                expected: file.hash,
                found,
            });
        }
        let body = file.body;
        body.mdp.validate()?;
        let mut reward = GroundTruthReward::default();
        for row in body.reward {
            reward
                .table
                .insert(State::new(&row.prompt, &row.generated), row.values);
        }
        Ok(Task {
            config: body.config,
            mdp: body.mdp,
            reward,
        })
    }
}

fn body_hash(body: &TaskBody) -> String {
    sha256_hex(&serde_json::to_vec(body).expect("task body serializes"))
}
