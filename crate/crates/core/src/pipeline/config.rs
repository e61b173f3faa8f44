use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::{AdpaOptions, DistillHyperparams};
use crate::pipeline::cache::Substitution;
use crate::policy::OptimizerConfig;
use crate::rl::PpoConfig;
use crate::task::{synth_task, Task, TaskConfig};

pub const CONFIG_FORMAT: &str = "ALIGNLAB-CONFIG-v1";

#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum Method {
    #[serde(rename = "sft")]
    Sft,
    #[serde(rename = "dpo")]
    Dpo,
    #[serde(rename = "vanilla-kd")]
    VanillaKd,
    #[serde(rename = "dckd")]
    Dckd,
    #[default]
    #[serde(rename = "adpa")]
    Adpa,
    #[serde(rename = "adpa+")]
    AdpaPlus,
    #[serde(rename = "q-argmax-kd")]
    QArgmaxKd,
    #[serde(rename = "q-softmax-kd")]
    QSoftmaxKd,
    #[serde(rename = "dppo-token")]
    DppoToken,
    #[serde(rename = "dppo-seq")]
    DppoSeq,
}

impl Method {
    pub const ALL: [Method; 10] = [
        Method::Sft,
        Method::Dpo,
        Method::VanillaKd,
        Method::Dckd,
        Method::Adpa,
        Method::AdpaPlus,
        Method::QArgmaxKd,
        Method::QSoftmaxKd,
        Method::DppoToken,
        Method::DppoSeq,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Sft => "sft",
            Method::Dpo => "dpo",
            Method::VanillaKd => "vanilla-kd",
            Method::Dckd => "dckd",
            Method::Adpa => "adpa",
            Method::AdpaPlus => "adpa+",
            Method::QArgmaxKd => "q-argmax-kd",
            Method::QSoftmaxKd => "q-softmax-kd",
            Method::DppoToken => "dppo-token",
            Method::DppoSeq => "dppo-seq",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Method::ALL.iter().map(|m| m.name()).collect();
                Error::config(
                    "method",
                    format!("unknown method `{s}`; expected one of {}", names.join(", ")),
                )
            })
    }
}

/// Where the states `s_t = (x, ŷ_<t)` of the distillation term come from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StateSource {
    #[default]
    Student,
    Teacher,
    Preferred,
    Dispreferred,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// DCKD: replace the DPO teacher by the reference teacher fine-tuned with SFT on `y_w`.
    pub no_dpo_teacher: bool,
    /// DCKD: drop the KL term on dispreferred responses.
    pub no_dispreferred: bool,
    /// ADPA: replace the log-ratio by `log π_dpo` (reverse cross-entropy to the DPO teacher).
    pub no_reference_teacher: bool,
}

/// How the DPO teacher is obtained.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherMode {
    /// DPO on the preference data starting from the reference teacher.
    #[default]
    Trained,
    /// The KL-regularized optimum against the reference teacher.
    Optimal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_pairs: usize,
    pub heldout_pairs: usize,
    /// Generated responses `ŷ` per preference triple.
    pub samples_per_prompt: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_pairs: 32,
            heldout_pairs: 128,
            samples_per_prompt: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub teacher_sft_epochs: usize,
    pub student_sft_epochs: usize,
    pub dpo_epochs: usize,
    pub dckd_epochs: usize,
    pub distill_epochs: usize,
    pub eval_every: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            teacher_sft_epochs: 50,
            student_sft_epochs: 10,
            dpo_epochs: 200,
            dckd_epochs: 20,
            distill_epochs: 20,
            eval_every: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Optimizers {
    pub sft: OptimizerConfig,
    pub dpo: OptimizerConfig,
    pub distill: OptimizerConfig,
}

impl Default for Optimizers {
    fn default() -> Self {
        Optimizers {
            sft: OptimizerConfig::Sgd { lr: 1.0 },
            dpo: OptimizerConfig::Sgd { lr: 1.0 },
            distill: OptimizerConfig::Sgd { lr: 0.5 },
        }
    }
}

/// Scales of the random "pretrained" logits each model starts from; 0 is uniform.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    pub teacher_scale: f64,
    pub student_scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CacheConfig {
    pub enabled: bool,
    pub k: usize,
    pub substitution: Substitution,
}

impl Default for CacheConfig {
    fn default() -> Self {
        CacheConfig {
            enabled: false,
            k: 50,
            substitution: Substitution::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub format: String,
    pub task: TaskConfig,
    #[serde(default)]
    pub method: Method,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub hyper: DistillHyperparams,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub optim: Optimizers,
    #[serde(default)]
    pub init: InitConfig,
    #[serde(default)]
    pub state_source: StateSource,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default)]
    pub cache: CacheConfig,
    #[serde(default)]
    pub adpa: AdpaOptions,
    #[serde(default)]
    pub ppo: PpoConfig,
    #[serde(default)]
    pub teacher: TeacherMode,
    /// Draw a fresh task per run seed instead of using `task.seed` for all.
    #[serde(default = "default_true")]
    pub task_per_seed: bool,
}

fn default_true() -> bool {
    true
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl TrainConfig {
    pub fn new(task: TaskConfig) -> Self {
        TrainConfig {
            format: CONFIG_FORMAT.into(),
            task,
            method: Method::default(),
            seeds: default_seeds(),
            hyper: DistillHyperparams::default(),
            data: DataConfig::default(),
            schedule: Schedule::default(),
            optim: Optimizers::default(),
            init: InitConfig::default(),
            state_source: StateSource::default(),
            ablation: Ablation::default(),
            cache: CacheConfig::default(),
            adpa: AdpaOptions::default(),
            ppo: PpoConfig::default(),
            teacher: TeacherMode::default(),
            task_per_seed: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != CONFIG_FORMAT {
            return Err(Error::config(
                "format",
                format!("expected `{CONFIG_FORMAT}`, found `{}`", self.format),
            ));
        }
        self.task.validate().map_err(|e| match e {
            Error::Config { path, message } => Error::config(format!("task.{path}"), message),
            other => other,
        })?;
        self.hyper.validate().map_err(|e| match e {
            Error::Config { path, message } => Error::config(format!("hyper.{path}"), message),
            other => other,
        })?;
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "must list at least one seed"));
        }
        if self.data.n_pairs == 0 {
            return Err(Error::config("data.n_pairs", "must be at least 1"));
        }
        if self.data.heldout_pairs == 0 {
            return Err(Error::config("data.heldout_pairs", "must be at least 1"));
        }
        if self.data.samples_per_prompt == 0 {
            return Err(Error::config(
                "data.samples_per_prompt",
                "must be at least 1",
            ));
        }
        if self.schedule.eval_every == 0 {
            return Err(Error::config("schedule.eval_every", "must be at least 1"));
        }
        for (name, v) in [
            ("init.teacher_scale", self.init.teacher_scale),
            ("init.student_scale", self.init.student_scale),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(name, "must be finite and non-negative"));
            }
        }
        if self.cache.k == 0 {
            return Err(Error::config("cache.k", "must be at least 1"));
        }
        self.optim.sft.validate("optim.sft")?;
        self.optim.dpo.validate("optim.dpo")?;
        self.optim.distill.validate("optim.distill")?;
        self.ppo.validate("ppo")
    }

    /// The task a run with `run_seed` trains on.
    pub fn task_for_seed(&self, run_seed: u64) -> Result<Task> {
        let seed = if self.task_per_seed {
            run_seed
        } else {
            self.task.seed
        };
        synth_task(seed, &self.task)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = crate::io::from_json_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: TrainConfig = crate::io::read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
