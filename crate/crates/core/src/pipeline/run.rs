//! The teacher/student pipelines and baseline dispatch.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::mdp::{prefix_states, State};
use crate::objectives::{
    adpa_loss, dckd_loss_with, dpo_loss, kd_loss, q_argmax_kd_loss, q_softmax_kd_loss,
    AdvantageView, DckdTerms,
};
use crate::oracle::backward_induction;
use crate::pipeline::cache::{build_advantage_cache, TopKAdvantageCache};
use crate::pipeline::config::{Method, StateSource, TeacherMode, TrainConfig};
use crate::pipeline::data::{
    instruction_data, synth_preference_data, InstructionPair, OnPolicyItem, PreferenceTriple,
};
use crate::pipeline::metrics::{MetricsRecord, SummaryRow};
use crate::pipeline::train::{
    batch_loss, run_dpo_phase, run_sft_phase, select_checkpoint, train_phase, EvalContext,
    PhaseOutcome, PhaseSpec,
};
use crate::policy::{sft_loss_and_grad, PolicyRole, TabularPolicy};
use crate::rl::{dppo_train, DppoTeachers, GranularityKind, RewardGranularity};
use crate::seed;
use crate::task::Task;

/// Everything the student phases consume: data and both teachers.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub seed: u64,
    pub instructions: Vec<InstructionPair>,
    pub train_pairs: Vec<PreferenceTriple>,
    pub heldout: Vec<PreferenceTriple>,
    /// Teacher after SFT.
    pub reference: TabularPolicy,
    pub dpo: TabularPolicy,
    /// Student after SFT.
    pub student_sft: TabularPolicy,
}

impl Prepared {
    /// `(x, y_w)` pairs of the training preferences.
    pub fn preferred_pairs(&self) -> Vec<InstructionPair> {
        self.train_pairs
            .iter()
            .map(|t| InstructionPair {
                prompt: t.prompt.clone(),
                response: t.preferred.clone(),
            })
            .collect()
    }

    pub fn eval_context<'a>(&'a self, task: &'a Task) -> EvalContext<'a> {
        EvalContext {
            mdp: &task.mdp,
            reward: &task.reward,
            heldout: &self.heldout,
            kl_ref: &self.student_sft,
        }
    }
}

/// Fresh preference pairs for Reward Accuracy, independent of the training pairs.
pub fn heldout_pairs(
    cfg: &TrainConfig,
    task: &Task,
    run_seed: u64,
) -> Result<Vec<PreferenceTriple>> {
    let sampler = TabularPolicy::uniform(task.mdp.vocab_size, PolicyRole::ReferenceTeacher);
    synth_preference_data(
        &task.mdp,
        &task.reward,
        &sampler,
        cfg.data.heldout_pairs,
        &mut seed::stream(run_seed, "heldout-pairs"),
        &mut seed::stream(run_seed, "heldout-bt-label"),
    )
}

/// Builds data and runs the teacher phases plus student SFT.
pub fn prepare(cfg: &TrainConfig, task: &Task, run_seed: u64) -> Result<Prepared> {
    cfg.validate()?;
    let mdp = &task.mdp;
    let v = mdp.vocab_size;
    let sampler = TabularPolicy::uniform(v, PolicyRole::ReferenceTeacher);
    let train_pairs = synth_preference_data(
        mdp,
        &task.reward,
        &sampler,
        cfg.data.n_pairs,
        &mut seed::stream(run_seed, "datagen"),
        &mut seed::stream(run_seed, "bt-label"),
    )?;
    let heldout = heldout_pairs(cfg, task, run_seed)?;
    let instructions = instruction_data(mdp, &task.reward)?;
    let init = |scale: f64, role, stream: &str| -> Result<TabularPolicy> {
        if scale == 0.0 {
            Ok(TabularPolicy::uniform(v, role))
        } else {
            TabularPolicy::random(mdp, role, scale, &mut seed::stream(run_seed, stream))
        }
    };
    let reference = run_sft_phase(
        &init(
            cfg.init.teacher_scale,
            PolicyRole::ReferenceTeacher,
            "teacher-init",
        )?,
        &instructions,
        cfg.schedule.teacher_sft_epochs,
        cfg.optim.sft,
    )?
    .with_role(PolicyRole::ReferenceTeacher);
    let dpo = match cfg.teacher {
        TeacherMode::Trained => run_dpo_phase(
            &reference,
            &reference,
            &train_pairs,
            cfg.hyper.beta,
            cfg.schedule.dpo_epochs,
            cfg.optim.dpo,
        )?,
        TeacherMode::Optimal => {
            backward_induction(mdp, &task.reward, &reference, cfg.hyper.beta)?.pi_star
        }
    }
    .with_role(PolicyRole::DpoTeacher);
    let student_sft = run_sft_phase(
        &init(cfg.init.student_scale, PolicyRole::Student, "student-init")?,
        &instructions,
        cfg.schedule.student_sft_epochs,
        cfg.optim.sft,
    )?
    .with_role(PolicyRole::StudentReference);
    Ok(Prepared {
        seed: run_seed,
        instructions,
        train_pairs,
        heldout,
        reference,
        dpo,
        student_sft,
    })
}

/// Result of one method on one seed.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub method: Method,
    pub seed: u64,
    /// Checkpoint selected by held-out mean true reward.
    pub policy: TabularPolicy,
    pub last: TabularPolicy,
    pub records: Vec<MetricsRecord>,
    /// Index into `records` of the selected checkpoint.
    pub selected: usize,
}

impl RunOutput {
    pub fn selected_record(&self) -> &MetricsRecord {
        &self.records[self.selected]
    }

    pub fn summary(&self) -> SummaryRow {
        SummaryRow::from(self.selected_record())
    }
}

/// `ŷ` for every training triple, drawn per `source`.
pub fn generate_items(
    cfg: &TrainConfig,
    task: &Task,
    prepared: &Prepared,
    student: &TabularPolicy,
    source: StateSource,
) -> Vec<OnPolicyItem> {
    let mut rng = seed::stream(prepared.seed, "generate");
    let mut items = Vec::new();
    for t in &prepared.train_pairs {
        let mut push = |generated: Vec<usize>| {
            items.push(OnPolicyItem {
                prompt: t.prompt.clone(),
                response: t.preferred.clone(),
                generated,
            })
        };
        match source {
            StateSource::Preferred => push(t.preferred.clone()),
            StateSource::Dispreferred => push(t.dispreferred.clone()),
            StateSource::Student | StateSource::Teacher => {
                let sampler = if source == StateSource::Student {
                    student
                } else {
                    &prepared.dpo
                };
                for _ in 0..cfg.data.samples_per_prompt {
                    push(
                        sampler
                            .sample_response(&task.mdp, &t.prompt, &mut rng)
                            .actions,
                    );
                }
            }
        }
    }
    items
}

/// States visited by the distillation term of `items`.
pub fn item_states(items: &[OnPolicyItem]) -> BTreeSet<State> {
    items
        .iter()
        .flat_map(|i| prefix_states(&i.prompt, &i.generated).collect::<Vec<_>>())
        .collect()
}

fn spec<'a>(
    cfg: &TrainConfig,
    method: Method,
    phase: &'a str,
    epochs: usize,
    seed: u64,
    offset: usize,
) -> PhaseSpec<'a> {
    PhaseSpec {
        method: method.name(),
        phase,
        epochs,
        optimizer: cfg.optim.distill,
        eval_every: cfg.schedule.eval_every,
        seed,
        step_offset: offset,
    }
}

/// Runs the advantage-guided phase (or a Q-function KD variant) from `init`
/// on states generated per `cfg.state_source`.
fn advantage_phase(
    cfg: &TrainConfig,
    task: &Task,
    prepared: &Prepared,
    method: Method,
    init: &TabularPolicy,
    offset: usize,
) -> Result<PhaseOutcome> {
    let items = generate_items(cfg, task, prepared, init, cfg.state_source);
    let beta = cfg.hyper.beta;
    let gamma = cfg.hyper.gamma;
    let cache: Option<TopKAdvantageCache> =
        if cfg.cache.enabled && !cfg.ablation.no_reference_teacher {
            Some(build_advantage_cache(
                &prepared.dpo,
                &prepared.reference,
                &item_states(&items),
                cfg.cache.k,
                cfg.cache.substitution,
            )?)
        } else {
            None
        };
    let view = if cfg.ablation.no_reference_teacher {
        AdvantageView::DpoOnly {
            dpo: &prepared.dpo,
            beta,
        }
    } else if let Some(cache) = &cache {
        AdvantageView::Cached { cache, beta }
    } else {
        AdvantageView::exact(&prepared.dpo, &prepared.reference, beta)
    };
    let ctx = prepared.eval_context(task);
    let phase = method.name();
    let spec = spec(
        cfg,
        method,
        phase,
        cfg.schedule.distill_epochs,
        prepared.seed,
        offset,
    );
    train_phase(init, &spec, Some(&ctx), |p| {
        batch_loss(p, &items, |p, it| match method {
            Method::QArgmaxKd => {
                q_argmax_kd_loss(p, &view, &it.prompt, &it.response, &it.generated, gamma)
            }
            Method::QSoftmaxKd => {
                q_softmax_kd_loss(p, &view, &it.prompt, &it.response, &it.generated, gamma)
            }
            _ => adpa_loss(
                p,
                &view,
                &it.prompt,
                &it.response,
                &it.generated,
                gamma,
                cfg.adpa,
            ),
        })
    })
}

fn dckd_phase(
    cfg: &TrainConfig,
    task: &Task,
    prepared: &Prepared,
    method: Method,
    epochs: usize,
) -> Result<PhaseOutcome> {
    let teacher = if cfg.ablation.no_dpo_teacher {
        run_sft_phase(
            &prepared.reference,
            &prepared.preferred_pairs(),
            cfg.schedule.teacher_sft_epochs,
            cfg.optim.sft,
        )?
    } else {
        prepared.dpo.clone()
    };
    let terms = DckdTerms {
        preferred: true,
        dispreferred: !cfg.ablation.no_dispreferred,
    };
    let alpha = cfg.hyper.alpha;
    let ctx = prepared.eval_context(task);
    let spec = spec(cfg, method, "dckd", epochs, prepared.seed, 0);
    train_phase(&prepared.student_sft, &spec, Some(&ctx), |p| {
        batch_loss(p, &prepared.train_pairs, |p, t| {
            dckd_loss_with(
                p,
                &teacher,
                &t.prompt,
                &t.preferred,
                &t.dispreferred,
                alpha,
                terms,
            )
        })
    })
}

fn finish(
    method: Method,
    seed: u64,
    out: PhaseOutcome,
    mut records: Vec<MetricsRecord>,
) -> Result<RunOutput> {
    let start = records.len();
    let selected = out.best_index.ok_or_else(|| {
        Error::config(
            "schedule",
            "final phase recorded no evaluation; use at least one epoch",
        )
    })?;
    records.extend(out.records);
    Ok(RunOutput {
        method,
        seed,
        policy: out.best,
        last: out.last,
        records,
        selected: start + selected,
    })
}

/// Teacher SFT, student SFT, DPO teacher, `ŷ` from the SFT student, then ADPA.
pub fn run_adpa(cfg: &TrainConfig, task: &Task, prepared: &Prepared) -> Result<RunOutput> {
    let out = advantage_phase(cfg, task, prepared, Method::Adpa, &prepared.student_sft, 0)?;
    finish(Method::Adpa, prepared.seed, out, Vec::new())
}

/// As [`run_adpa`] with a DCKD phase between student SFT and generation; ADPA
/// starts from the DCKD student and uses its generations.
pub fn run_adpa_plus(cfg: &TrainConfig, task: &Task, prepared: &Prepared) -> Result<RunOutput> {
    let dckd = dckd_phase(
        cfg,
        task,
        prepared,
        Method::AdpaPlus,
        cfg.schedule.dckd_epochs,
    )?;
    let offset = cfg.schedule.dckd_epochs;
    let out = advantage_phase(cfg, task, prepared, Method::AdpaPlus, &dckd.last, offset)?;
    finish(Method::AdpaPlus, prepared.seed, out, dckd.records)
}

/// Runs `method` on an already prepared seed.
pub fn run_prepared(
    cfg: &TrainConfig,
    task: &Task,
    prepared: &Prepared,
    method: Method,
) -> Result<RunOutput> {
    let seed = prepared.seed;
    let ctx = prepared.eval_context(task);
    let epochs = cfg.schedule.distill_epochs;
    let pairs = &prepared.train_pairs;
    let out = match method {
        Method::Adpa => return run_adpa(cfg, task, prepared),
        Method::AdpaPlus => return run_adpa_plus(cfg, task, prepared),
        Method::QArgmaxKd | Method::QSoftmaxKd => {
            advantage_phase(cfg, task, prepared, method, &prepared.student_sft, 0)?
        }
        Method::Sft => {
            let data = prepared.preferred_pairs();
            let spec = spec(cfg, method, "sft", epochs, seed, 0);
            train_phase(&prepared.student_sft, &spec, Some(&ctx), |p| {
                batch_loss(p, &data, |p, d| {
                    sft_loss_and_grad(p, &d.prompt, &d.response)
                })
            })?
        }
        Method::Dpo => {
            let spec = spec(cfg, method, "dpo", epochs, seed, 0);
            let reference = &prepared.student_sft;
            let beta = cfg.hyper.beta;
            train_phase(reference, &spec, Some(&ctx), |p| {
                batch_loss(p, pairs, |p, t| {
                    dpo_loss(p, reference, &t.prompt, &t.preferred, &t.dispreferred, beta)
                })
            })?
        }
        Method::VanillaKd => {
            let spec = spec(cfg, method, "vanilla-kd", epochs, seed, 0);
            let alpha = cfg.hyper.alpha;
            train_phase(&prepared.student_sft, &spec, Some(&ctx), |p| {
                batch_loss(p, pairs, |p, t| {
                    kd_loss(p, &prepared.dpo, &t.prompt, &t.preferred, alpha)
                })
            })?
        }
        Method::Dckd => dckd_phase(cfg, task, prepared, method, epochs)?,
        Method::DppoToken | Method::DppoSeq => {
            let kind = if method == Method::DppoToken {
                GranularityKind::TokenLevel
            } else {
                GranularityKind::SequenceLevel
            };
            let (last, mut records) = dppo_train(
                &prepared.student_sft,
                DppoTeachers {
                    student_ref: &prepared.student_sft,
                    dpo: &prepared.dpo,
                    reference: &prepared.reference,
                },
                RewardGranularity {
                    kind,
                    beta: cfg.hyper.beta,
                },
                &cfg.ppo,
                &task.mdp,
                &task.reward,
                &prepared.preferred_pairs(),
                seed,
            )?;
            let selected = select_checkpoint(&records)
                .ok_or_else(|| Error::config("ppo.epochs", "must be at least 1"))?;
            for r in &mut records {
                r.reward_accuracy = None;
            }
            // PPO keeps only its last iterate; the selected row is reported,
            // and the returned policy is the final one.
            return Ok(RunOutput {
                method,
                seed,
                policy: last.clone(),
                last,
                records,
                selected,
            });
        }
    };
    finish(method, seed, out, Vec::new())
}

/// Prepares `run_seed` and runs `cfg.method`.
pub fn run_method(cfg: &TrainConfig, task: &Task, run_seed: u64) -> Result<RunOutput> {
    let prepared = prepare(cfg, task, run_seed)?;
    run_prepared(cfg, task, &prepared, cfg.method)
}

/// Ordered phase list of a configuration, for dry runs.
pub fn phase_plan(cfg: &TrainConfig) -> Vec<String> {
    let s = &cfg.schedule;
    let mut plan = vec![
        format!("data: {} training pairs, {} held-out pairs, instruction data = best response per prompt", cfg.data.n_pairs, cfg.data.heldout_pairs),
        format!("teacher-sft: init scale {} -> reference teacher, {} epochs", cfg.init.teacher_scale, s.teacher_sft_epochs),
        match cfg.teacher {
            TeacherMode::Trained => format!("teacher-dpo: reference teacher -> dpo teacher, {} epochs, beta {}", s.dpo_epochs, cfg.hyper.beta),
            TeacherMode::Optimal => format!("teacher-optimal: dpo teacher = regularized optimum, beta {}", cfg.hyper.beta),
        },
        format!("student-sft: init scale {} -> sft student, {} epochs", cfg.init.student_scale, s.student_sft_epochs),
    ];
    let source = match cfg.state_source {
        StateSource::Student => "student",
        StateSource::Teacher => "teacher",
        StateSource::Preferred => "preferred",
        StateSource::Dispreferred => "dispreferred",
    };
    let view = if cfg.ablation.no_reference_teacher {
        "dpo-only".to_string()
    } else if cfg.cache.enabled {
        format!("top-{} cache", cfg.cache.k)
    } else {
        "exact".to_string()
    };
    let dckd_teacher = if cfg.ablation.no_dpo_teacher {
        "sft-on-preferred teacher"
    } else {
        "dpo teacher"
    };
    let dckd_terms = if cfg.ablation.no_dispreferred {
        "preferred"
    } else {
        "preferred+dispreferred"
    };
    match cfg.method {
        Method::Adpa | Method::QArgmaxKd | Method::QSoftmaxKd => {
            plan.push(format!(
                "generate: y_hat from {source}, {} per triple",
                cfg.data.samples_per_prompt
            ));
            plan.push(format!(
                "{}: sft student, {view} advantage, gamma {}, {} epochs",
                cfg.method, cfg.hyper.gamma, s.distill_epochs
            ));
        }
        Method::AdpaPlus => {
            plan.push(format!(
                "dckd: sft student, {dckd_teacher}, {dckd_terms}, alpha {}, {} epochs",
                cfg.hyper.alpha, s.dckd_epochs
            ));
            plan.push(format!(
                "generate: y_hat from {}, {} per triple",
                if cfg.state_source == StateSource::Student {
                    "dckd student"
                } else {
                    source
                },
                cfg.data.samples_per_prompt
            ));
            plan.push(format!(
                "adpa+: dckd student, {view} advantage, gamma {}, {} epochs",
                cfg.hyper.gamma, s.distill_epochs
            ));
        }
        Method::Sft => plan.push(format!(
            "sft: sft student on preferred responses, {} epochs",
            s.distill_epochs
        )),
        Method::Dpo => plan.push(format!(
            "dpo: sft student against itself, beta {}, {} epochs",
            cfg.hyper.beta, s.distill_epochs
        )),
        Method::VanillaKd => plan.push(format!(
            "vanilla-kd: sft student, dpo teacher on preferred, alpha {}, {} epochs",
            cfg.hyper.alpha, s.distill_epochs
        )),
        Method::Dckd => plan.push(format!(
            "dckd: sft student, {dckd_teacher}, {dckd_terms}, alpha {}, {} epochs",
            cfg.hyper.alpha, s.distill_epochs
        )),
        Method::DppoToken | Method::DppoSeq => plan.push(format!(
            "{}: sft student, {} rollouts per prompt, {} epochs x {} inner, clip {:?}",
            cfg.method,
            cfg.ppo.rollouts_per_prompt,
            cfg.ppo.epochs,
            cfg.ppo.inner_epochs,
            cfg.ppo.clip_epsilon
        )),
    }
    plan.push("select: best held-out mean true reward, ties to earliest".into());
    plan
}
