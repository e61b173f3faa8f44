//! One line per acceptance criterion; exits nonzero if any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::time::{Duration, Instant};

use alignlab::math::sample_std;
use alignlab::mdp::{State, Token, TokenMdp};
use alignlab::objectives::{
    adpa_grad_direct, adpa_grad_policy_form, advantage, AdpaOptions, AdvantageView, GAMMA_GRID,
};
use alignlab::oracle::{
    advantage_identity_check, backward_induction, soft_bellman_deviation, telescoping_check,
};
use alignlab::pipeline::{
    build_advantage_cache, prepare, run_prepared, run_sweep, sweep_means, sweep_shape, GridSpec,
    Method, Prepared, RunOutput, StateSource, Substitution, TrainConfig,
};
use alignlab::policy::{PolicyRole, TabularPolicy};
use alignlab::rl::{
    sample_complexity_probe, sequence_reward, token_reward, GranularityKind, ProbeOracles,
    RewardGranularity,
};
use alignlab::seed;
use alignlab::task::Task;
use common::{
    brute_soft_value, loss_instance, losses, path_logprob, path_reward, random_policy, random_task,
    worst_fd_error,
};

const IDENTITY_TOL: f64 = 1e-8;
const IDENTITY_TASKS: u64 = 100;
const IDENTITY_BUDGET: Duration = Duration::from_secs(60);
const IMPLICIT_TOL: f64 = 1e-8;
const MAX_TRAJECTORIES_FOR_PAIRS: usize = 200;
const FD_TOL: f64 = 1e-5;
const FD_INSTANCES: u64 = 50;
const FORMS_TOL: f64 = 1e-12;
const FORMS_INSTANCES: u64 = 50;
const CACHE_TOL: f64 = 1e-10;
const DESK_BUDGET: Duration = Duration::from_secs(600);
const MAJORITY: usize = 4;

const DESK: &str = include_str!("../../../configs/desk.json");

type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn desk() -> TrainConfig {
    TrainConfig::from_json(DESK).unwrap()
}

/// Soft-value log-sum-exp, advantage = β log-ratio, and the telescoping sum on
/// every enumerated trajectory, plus a brute-force value at each root.
fn c1_identities() -> Outcome {
    let start = Instant::now();
    let mut worst = [0.0f64; 4];
    let mut trajectories = 0usize;
    for seed in 0..IDENTITY_TASKS {
        let task = random_task(seed, 5, 4);
        let mut rng = seed::stream(seed, "reference");
        let reference = random_policy(&task.mdp, PolicyRole::ReferenceTeacher, 1.5, &mut rng);
        for beta in [0.05, 0.5, 1.0] {
            let sol = backward_induction(&task.mdp, &task.reward, &reference, beta).unwrap();
            worst[0] = worst[0]
                .max(soft_bellman_deviation(&task.mdp, &task.reward, &reference, &sol).unwrap());
            worst[1] = worst[1].max(advantage_identity_check(&sol, &reference));
            for x in &task.mdp.prompts {
                for t in task.mdp.enumerate_trajectories(x).unwrap() {
                    worst[2] = worst[2].max(
                        telescoping_check(&task.reward, &sol, &reference, &t)
                            .unwrap()
                            .2,
                    );
                    trajectories += 1;
                }
                let root = brute_soft_value(&task.mdp, &task.reward, &reference, beta, x, &[]);
                let v = sol.value(&task.mdp.initial_state(x));
                worst[3] = worst[3].max((v - root).abs());
            }
        }
    }
    let elapsed = start.elapsed();
    let max = worst.iter().cloned().fold(0.0, f64::max);
    outcome(
        max < IDENTITY_TOL && elapsed < IDENTITY_BUDGET,
        format!(
            "{IDENTITY_TASKS} tasks x 3 betas, {trajectories} trajectories; max dev value {:.1e}, advantage {:.1e}, telescoping {:.1e}, brute-force root {:.1e} (tol {IDENTITY_TOL:e}); {:.1}s (budget {}s)",
            worst[0],
            worst[1],
            worst[2],
            worst[3],
            elapsed.as_secs_f64(),
            IDENTITY_BUDGET.as_secs()
        ),
    )
}

fn c2_implicit_reward() -> Outcome {
    let (mut worst, mut pairs, mut tasks) = (0.0f64, 0usize, 0usize);
    for seed in 0..IDENTITY_TASKS {
        let task = random_task(seed, 5, 4);
        if task.mdp.trajectories_per_prompt() > MAX_TRAJECTORIES_FOR_PAIRS as u128 {
            continue;
        }
        tasks += 1;
        let mut rng = seed::stream(seed, "reference");
        let reference = random_policy(&task.mdp, PolicyRole::ReferenceTeacher, 1.5, &mut rng);
        let beta = [0.05, 0.5, 1.0][seed as usize % 3];
        let sol = backward_induction(&task.mdp, &task.reward, &reference, beta).unwrap();
        for x in &task.mdp.prompts {
            let ys: Vec<Vec<Token>> = task
                .mdp
                .enumerate_trajectories(x)
                .unwrap()
                .into_iter()
                .map(|t| t.actions)
                .collect();
            let ratio: Vec<f64> = ys
                .iter()
                .map(|y| path_logprob(&sol.pi_star, x, y) - path_logprob(&reference, x, y))
                .collect();
            let r: Vec<f64> = ys.iter().map(|y| path_reward(&task.reward, x, y)).collect();
            for i in 0..ys.len() {
                for j in i + 1..ys.len() {
                    worst = worst.max((beta * (ratio[i] - ratio[j]) - (r[i] - r[j])).abs());
                    pairs += 1;
                }
            }
        }
    }
    outcome(
        worst < IMPLICIT_TOL && tasks > 0,
        format!("{tasks} tasks, {pairs} same-prompt pairs; max deviation {worst:.1e} (tol {IMPLICIT_TOL:e})"),
    )
}

fn c3_gradients() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, loss) in losses() {
        let worst = worst_fd_error(&loss, FD_INSTANCES);
        pass &= worst < FD_TOL;
        parts.push(format!("{name} {worst:.1e}"));
    }
    outcome(
        pass,
        format!(
            "worst relative error over {FD_INSTANCES} instances each (tol {FD_TOL:e}): {}",
            parts.join(", ")
        ),
    )
}

fn c4_gradient_forms() -> Outcome {
    let mut worst: f64 = 0.0;
    for i in 0..FORMS_INSTANCES {
        let inst = loss_instance(i);
        let view = AdvantageView::exact(&inst.dpo, &inst.reference, inst.beta);
        let opts = AdpaOptions::default();
        let a = adpa_grad_policy_form(&inst.student, &view, &inst.x, &inst.y_hat, inst.gamma, opts)
            .unwrap();
        let b =
            adpa_grad_direct(&inst.student, &view, &inst.x, &inst.y_hat, inst.gamma, opts).unwrap();
        worst = worst.max(a.max_abs_diff(&b));
    }
    outcome(
        worst < FORMS_TOL,
        format!(
            "{FORMS_INSTANCES} instances; max entrywise difference {worst:.1e} (tol {FORMS_TOL:e})"
        ),
    )
}

fn c5_probe_counts() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for vocab in [3usize, 4] {
        for remaining in [2usize, 3] {
            let mdp = TokenMdp::new(vocab, 0, remaining, vec![vec![1]]).unwrap();
            let mut rng = seed::stream(vocab as u64 * 10 + remaining as u64, "probe");
            let dpo = random_policy(&mdp, PolicyRole::DpoTeacher, 1.0, &mut rng);
            let reference = random_policy(&mdp, PolicyRole::ReferenceTeacher, 1.0, &mut rng);
            let beta = 0.5;
            let tok = |s: &State, a: Token| Ok(token_reward(&dpo, &reference, s, a, beta));
            let seq = |x: &[Token], y: &[Token]| sequence_reward(&dpo, &reference, x, y, beta);
            let oracles = ProbeOracles {
                mdp: &mdp,
                distribution: AdvantageView::exact(&dpo, &reference, beta),
                token: &tok,
                sequence: &seq,
                reference: &reference,
            };
            let s = mdp.initial_state(&[1]);
            let q = |kind| {
                sample_complexity_probe(&s, RewardGranularity { kind, beta }, &oracles)
                    .unwrap()
                    .queries
            };
            let got = (
                q(GranularityKind::DistributionLevel),
                q(GranularityKind::TokenLevel),
                q(GranularityKind::SequenceLevel),
            );
            let want = (1, vocab as u128, (vocab as u128).pow(remaining as u32));
            pass &= got == want;
            parts.push(format!(
                "|A|={vocab} T-t={remaining}: {}/{}/{}",
                got.0, got.1, got.2
            ));
        }
    }
    outcome(
        pass,
        format!("distribution/token/sequence queries: {}", parts.join("; ")),
    )
}

struct SeedRun {
    task: Task,
    prepared: Prepared,
}

fn seed_runs(cfg: &TrainConfig) -> Vec<SeedRun> {
    cfg.seeds
        .iter()
        .map(|&seed| {
            let task = cfg.task_for_seed(seed).unwrap();
            let prepared = prepare(cfg, &task, seed).unwrap();
            SeedRun { task, prepared }
        })
        .collect()
}

fn run(cfg: &TrainConfig, r: &SeedRun, method: Method) -> RunOutput {
    run_prepared(cfg, &r.task, &r.prepared, method).unwrap()
}

fn final_reward(o: &RunOutput) -> f64 {
    o.records.last().unwrap().mean_true_reward
}

/// Sample std of the eval trace over the second half of training.
fn trace_std(o: &RunOutput) -> f64 {
    let trace: Vec<f64> = o.records.iter().map(|r| r.mean_true_reward).collect();
    sample_std(&trace[trace.len() / 2..])
}

fn c6_granularity(cfg: &TrainConfig, runs: &[SeedRun]) -> Outcome {
    let start = Instant::now();
    let (mut order, mut calm) = (0, 0);
    let mut rows = Vec::new();
    for r in runs {
        let adpa = run(cfg, r, Method::Adpa);
        let tok = run(cfg, r, Method::DppoToken);
        let seq = run(cfg, r, Method::DppoSeq);
        let (a, t, s) = (final_reward(&adpa), final_reward(&tok), final_reward(&seq));
        order += usize::from(a > t && t > s);
        calm +=
            usize::from(trace_std(&adpa) < trace_std(&tok) && trace_std(&adpa) < trace_std(&seq));
        rows.push(format!("{a:.3}/{t:.3}/{s:.3}"));
    }
    let elapsed = start.elapsed();
    outcome(
        order >= MAJORITY && calm >= MAJORITY && elapsed < DESK_BUDGET,
        format!(
            "final reward adpa/token/seq per seed [{}]; adpa>token>seq on {order}/{n}, lower trace std on {calm}/{n} (need {MAJORITY}); {:.1}s",
            rows.join(" "),
            elapsed.as_secs_f64(),
            n = runs.len()
        ),
    )
}

fn c7_orderings(cfg: &TrainConfig, runs: &[SeedRun]) -> Outcome {
    let variant = |f: &dyn Fn(&mut TrainConfig)| {
        let mut c = cfg.clone();
        f(&mut c);
        c
    };
    let no_dpo = variant(&|c| c.ablation.no_dpo_teacher = true);
    let no_disp = variant(&|c| c.ablation.no_dispreferred = true);
    let no_ref = variant(&|c| c.ablation.no_reference_teacher = true);
    let sources: Vec<(&str, TrainConfig)> = [
        ("teacher", StateSource::Teacher),
        ("preferred", StateSource::Preferred),
        ("dispreferred", StateSource::Dispreferred),
    ]
    .into_iter()
    .map(|(n, s)| (n, variant(&|c| c.state_source = s)))
    .collect();
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut tally =
        |name: String, holds: bool| *counts.entry(name).or_default() += usize::from(holds);
    for r in runs {
        let sel = |c: &TrainConfig, m| run(c, r, m).selected_record().mean_true_reward;
        let dpo = sel(cfg, Method::Dpo);
        let adpa = sel(cfg, Method::Adpa);
        let plus = sel(cfg, Method::AdpaPlus);
        let dckd = sel(cfg, Method::Dckd);
        tally("adpa+>=adpa".into(), plus >= adpa);
        tally("adpa>=dpo".into(), adpa >= dpo);
        tally(
            "dckd>dckd-no-dpo-teacher".into(),
            dckd > sel(&no_dpo, Method::Dckd),
        );
        tally(
            "dckd>dckd-no-dispreferred".into(),
            dckd > sel(&no_disp, Method::Dckd),
        );
        tally(
            "adpa>adpa-no-reference".into(),
            adpa > sel(&no_ref, Method::Adpa),
        );
        for (n, c) in &sources {
            tally(
                format!("student-source>={n}-source"),
                adpa >= sel(c, Method::Adpa),
            );
        }
    }
    let pass = counts.values().all(|&c| c >= MAJORITY);
    let parts: Vec<String> = counts
        .iter()
        .map(|(k, v)| format!("{k} {v}/{}", runs.len()))
        .collect();
    outcome(pass, format!("{} (need {MAJORITY} each)", parts.join(", ")))
}

fn c8_gamma_sweep(cfg: &TrainConfig) -> Outcome {
    let grid = GridSpec {
        param: alignlab::pipeline::SweepParam::Gamma,
        values: GAMMA_GRID.to_vec(),
    };
    let rows = run_sweep(cfg, &grid).unwrap();
    let cells = sweep_means(&grid, &rows);
    let shape = sweep_shape(&cells, 3.0);
    let curve: Vec<String> = cells
        .iter()
        .map(|c| {
            format!(
                "{}:{:.4}/{:.4}",
                c.value, c.mean_true_reward, c.reward_accuracy
            )
        })
        .collect();
    outcome(
        shape.accuracy_rises_to_peak && shape.reward_peak_interior_or_right,
        format!(
            "gamma:reward/accuracy [{}]; accuracy non-decreasing to its peak at {}: {}; reward peak at {}: {}; decline beyond 3 reproduced: {} (reported, not asserted)",
            curve.join(" "),
            shape.accuracy_peak,
            shape.accuracy_rises_to_peak,
            shape.reward_peak,
            shape.reward_peak_interior_or_right,
            shape.declines_after.map_or("n/a".into(), |d| d.to_string())
        ),
    )
}

fn c9_cache() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let task = random_task(seed, 5, 4);
        let mut rng = seed::stream(seed, "teachers");
        let dpo = random_policy(&task.mdp, PolicyRole::DpoTeacher, 2.0, &mut rng);
        let reference = random_policy(&task.mdp, PolicyRole::ReferenceTeacher, 2.0, &mut rng);
        let states = task.mdp.all_states().unwrap();
        let cache = build_advantage_cache(
            &dpo,
            &reference,
            &states,
            task.mdp.vocab_size,
            Substitution::LogSpace,
        )
        .unwrap();
        let cached = AdvantageView::Cached {
            cache: &cache,
            beta: 0.05,
        };
        let exact = AdvantageView::exact(&dpo, &reference, 0.05);
        for s in &states {
            for (a, b) in advantage(&cached, s)
                .unwrap()
                .iter()
                .zip(advantage(&exact, s).unwrap())
            {
                worst = worst.max((a - b).abs());
            }
        }
    }
    let s = State::new(&[1], &[]);
    let from_probs = |p: &[f64], role| {
        let mut logits = BTreeMap::new();
        logits.insert(s.clone(), p.iter().map(|x| x.ln()).collect());
        TabularPolicy::from_logits(4, role, logits).unwrap()
    };
    let reference = from_probs(&[0.4, 0.3, 0.2, 0.1], PolicyRole::ReferenceTeacher);
    let dpo = from_probs(&[0.35, 0.15, 0.4, 0.1], PolicyRole::DpoTeacher);
    let cache = build_advantage_cache(&dpo, &reference, [&s], 2, Substitution::LogSpace).unwrap();
    let (d, r) = (dpo.log_probs(&s), reference.log_probs(&s));
    let fixture = cache.row(&s).unwrap().entries == vec![(0, d[0] - r[0]), (2, d[2] - r[1])];
    outcome(
        worst < CACHE_TOL && fixture,
        format!("k = |A| max deviation {worst:.1e} (tol {CACHE_TOL:e}); k = 2 fixture bit-exact: {fixture}"),
    )
}

fn c10_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("desk.json");
    std::fs::write(&cfg_path, DESK).unwrap();
    let train = |out: &str, method: &str, jobs: &str| {
        let o = Command::new(env!("CARGO_BIN_EXE_alignlab"))
            .args([
                "train",
                "--config",
                cfg_path.to_str().unwrap(),
                "--method",
                method,
                "--jobs",
                jobs,
                "--out",
            ])
            .arg(dir.path().join(out))
            .env_remove("ALIGNLAB_OUT")
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    };
    let mut identical = true;
    let mut files = 0;
    for method in ["adpa+", "dppo-token"] {
        train(&format!("{method}-a"), method, "1");
        train(&format!("{method}-b"), method, "4");
        for f in ["summary.csv", "metrics.jsonl"] {
            let a = std::fs::read(dir.path().join(format!("{method}-a")).join(f)).unwrap();
            let b = std::fs::read(dir.path().join(format!("{method}-b")).join(f)).unwrap();
            identical &= a == b && !a.is_empty();
            files += 1;
        }
    }
    outcome(
        identical,
        format!(
            "{files} metric files from two runs each (1 vs 4 threads) byte-identical: {identical}"
        ),
    )
}

fn main() {
    let cfg = desk();
    let runs = seed_runs(&cfg);
    let criteria: Vec<(&str, &str, Check)> = vec![
        ("C1", "optimum identity suite", Box::new(c1_identities)),
        (
            "C2",
            "same-prompt implicit reward",
            Box::new(c2_implicit_reward),
        ),
        ("C3", "gradient oracle", Box::new(c3_gradients)),
        (
            "C4",
            "ADPA gradient forms agree",
            Box::new(c4_gradient_forms),
        ),
        ("C5", "sample-complexity counts", Box::new(c5_probe_counts)),
        (
            "C6",
            "reward granularity ordering",
            Box::new(|| c6_granularity(&cfg, &runs)),
        ),
        (
            "C7",
            "method and ablation orderings",
            Box::new(|| c7_orderings(&cfg, &runs)),
        ),
        ("C8", "gamma sweep shape", Box::new(|| c8_gamma_sweep(&cfg))),
        ("C9", "advantage cache exactness", Box::new(c9_cache)),
        ("C10", "determinism", Box::new(c10_determinism)),
    ];
    let mut failed = Vec::new();
    for (id, title, check) in &criteria {
        let start = Instant::now();
        let o = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!(
            "{tag} {id} {title} ({:.1}s): {}",
            start.elapsed().as_secs_f64(),
            o.detail
        );
        if !o.pass {
            failed.push(*id);
        }
    }
    println!(
        "{}/{} criteria passed",
        criteria.len() - failed.len(),
        criteria.len()
    );
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
