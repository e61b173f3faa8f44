//! Command-line front end. Exit code 2 marks configuration and usage errors,
//! 1 any other failure.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::{read_json, write_atomic};
use crate::oracle::{backward_induction, identity_suite, OracleReport, OracleTolerances};
use crate::pipeline::metrics::{read_jsonl, write_jsonl, write_summary_csv};
use crate::pipeline::{
    build_advantage_cache, evaluate, heldout_pairs, phase_plan, prepare, read_csv, run_prepared,
    run_sweep, sweep_means, sweep_shape, write_csv, GridSpec, Method, MetricsRecord, RunOutput,
    SummaryRow, SweepCell, TrainConfig,
};
use crate::policy::{PolicyRole, TabularPolicy};
use crate::task::{synth_task, Task, TaskConfig};

pub const OUT_ENV: &str = "ALIGNLAB_OUT";

#[derive(Debug, Parser)]
#[command(
    name = "alignlab",
    version,
    about = "Preference-alignment distillation on exact token MDPs"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct OutArg {
    /// Output directory (the ALIGNLAB_OUT environment variable takes precedence).
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

impl OutArg {
    fn dir(&self) -> Result<PathBuf> {
        let dir = std::env::var_os(OUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| self.out.clone());
        std::fs::create_dir_all(&dir)?;
        Ok(dir)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a task and write it with its content hash.
    GenTask {
        /// Task configuration, or a training configuration whose `task` section is used.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Train one method on every configured seed.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        method: Option<Method>,
        /// Train this seed only.
        #[arg(long)]
        seed: Option<u64>,
        /// Use a saved task for every seed.
        #[arg(long)]
        task: Option<PathBuf>,
        #[arg(long)]
        jobs: Option<usize>,
        /// Print the phase plan and exit.
        #[arg(long)]
        dry_run: bool,
        #[command(flatten)]
        out: OutArg,
    },
    /// Evaluate a checkpoint on held-out data.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        opponent: Option<PathBuf>,
        #[arg(long)]
        task: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of sampled responses.
        #[arg(long, default_value_t = 256)]
        samples: usize,
        #[command(flatten)]
        out: OutArg,
    },
    /// Check the optimum identities on a task.
    OracleCheck {
        #[arg(long, conflicts_with = "task")]
        config: Option<PathBuf>,
        #[arg(long)]
        task: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Reference checkpoint; uniform when absent.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// DPO checkpoint to compare against the optimum.
        #[arg(long)]
        dpo: Option<PathBuf>,
        /// Defaults to `hyper.beta` of the configuration, else 0.1.
        #[arg(long)]
        beta: Option<f64>,
        /// One tolerance for every check.
        #[arg(long)]
        tolerance: Option<f64>,
    },
    /// Sweep alpha or gamma over the configured seeds.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// `gamma`, `alpha`, or `name=v1,v2,...`.
        #[arg(long, default_value = "gamma")]
        grid: GridSpec,
        #[arg(long)]
        jobs: Option<usize>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Precompute the top-k advantage cache over every state of a task.
    CacheBuild {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        task: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, requires = "reference")]
        dpo: Option<PathBuf>,
        #[arg(long, requires = "dpo")]
        reference: Option<PathBuf>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Summarize `summary.csv` and `sweep_means.csv` of an output directory.
    Report {
        #[command(flatten)]
        out: OutArg,
    },
}

/// Parses `std::env::args`, runs, and returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } => 2,
        _ => 1,
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenTask { config, seed, out } => gen_task(&config, seed, &out.dir()?),
        Command::Train {
            config,
            method,
            seed,
            task,
            jobs,
            dry_run,
            out,
        } => {
            let mut cfg = TrainConfig::load(&config)?;
            if let Some(m) = method {
                cfg.method = m;
            }
            if let Some(s) = seed {
                cfg.seeds = vec![s];
            }
            if dry_run {
                for line in phase_plan(&cfg) {
                    println!("{line}");
                }
                return Ok(());
            }
            let task = task.map(|p| Task::load(&p)).transpose()?;
            with_pool(jobs, || train(&cfg, task.as_ref(), &out.dir()?))
        }
        Command::Evaluate {
            config,
            checkpoint,
            opponent,
            task,
            seed,
            samples,
            out,
        } => {
            let cfg = TrainConfig::load(&config)?;
            evaluate_cmd(
                &cfg,
                &checkpoint,
                opponent.as_deref(),
                task.as_deref(),
                seed,
                samples,
                &out.dir()?,
            )
        }
        Command::OracleCheck {
            config,
            task,
            seed,
            reference,
            dpo,
            beta,
            tolerance,
        } => oracle_check(
            config.as_deref(),
            task.as_deref(),
            seed,
            reference.as_deref(),
            dpo.as_deref(),
            beta,
            tolerance,
        ),
        Command::Sweep {
            config,
            grid,
            jobs,
            out,
        } => {
            let cfg = TrainConfig::load(&config)?;
            with_pool(jobs, || sweep(&cfg, &grid, &out.dir()?))
        }
        Command::CacheBuild {
            config,
            task,
            seed,
            dpo,
            reference,
            out,
        } => {
            let cfg = TrainConfig::load(&config)?;
            cache_build(
                &cfg,
                task.as_deref(),
                seed,
                dpo.as_deref().zip(reference.as_deref()),
                &out.dir()?,
            )
        }
        Command::Report { out } => report(&out.dir()?),
    }
}

fn with_pool<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match jobs {
        None => f(),
        Some(0) => Err(Error::config("jobs", "must be at least 1")),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::precondition(format!("thread pool: {e}")))?
            .install(f),
    }
}

fn gen_task(config: &Path, seed: Option<u64>, out: &Path) -> Result<()> {
    let value: serde_json::Value = read_json(config)?;
    let task_cfg: TaskConfig = if value.get("format").is_some() {
        TrainConfig::load(config)?.task
    } else {
        read_json(config)?
    };
    let task = synth_task(seed.unwrap_or(task_cfg.seed), &task_cfg)?;
    let path = out.join("task.json");
    let hash = task.save(&path)?;
    println!("{} {hash}", path.display());
    Ok(())
}

pub fn checkpoint_path(out: &Path, method: Method, seed: u64) -> PathBuf {
    out.join(format!("{method}-seed{seed}.policy.json"))
}

pub fn task_path(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("task-seed{seed}.json"))
}

fn train(cfg: &TrainConfig, fixed_task: Option<&Task>, out: &Path) -> Result<()> {
    let results: Vec<Result<(Task, RunOutput)>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let task = match fixed_task {
                Some(t) => t.clone(),
                None => cfg.task_for_seed(seed)?,
            };
            let prepared = prepare(cfg, &task, seed)?;
            let run = run_prepared(cfg, &task, &prepared, cfg.method)?;
            Ok((task, run))
        })
        .collect();
    // Completed seeds are written even when a later one fails.
    let mut records: Vec<MetricsRecord> = Vec::new();
    let mut summary: Vec<SummaryRow> = Vec::new();
    let mut first_err = None;
    for (seed, r) in cfg.seeds.iter().zip(results) {
        match r {
            Ok((task, run)) => {
                let task_hash = task.save(&task_path(out, *seed))?;
                run.policy
                    .save(&checkpoint_path(out, cfg.method, *seed), &task_hash)?;
                summary.push(run.summary());
                records.extend(run.records);
            }
            Err(e) => {
                eprintln!("seed {seed}: {e}");
                first_err.get_or_insert(e);
            }
        }
    }
    write_jsonl(&out.join("metrics.jsonl"), &records)?;
    write_summary_csv(&out.join("summary.csv"), &summary)?;
    for row in &summary {
        println!(
            "{} seed {}: step {} mean true reward {:.6} reward accuracy {}",
            row.method,
            row.seed,
            row.selected_step,
            row.mean_true_reward,
            row.reward_accuracy
                .map_or("-".into(), |a| format!("{a:.4}"))
        );
    }
    first_err.map_or(Ok(()), Err)
}

fn load_checked(path: &Path, task: &Task) -> Result<TabularPolicy> {
    let (policy, task_hash) = TabularPolicy::load(path)?;
    let expected = task.hash();
    if !task_hash.is_empty() && task_hash != expected {
        return Err(Error::Integrity {
            what: format!("task of checkpoint {}", path.display()),
            expected,
            found: task_hash,
        });
    }
    if policy.vocab_size() != task.mdp.vocab_size {
        return Err(Error::precondition(format!(
            "checkpoint {} has vocabulary {}, task has {}",
            path.display(),
            policy.vocab_size(),
            task.mdp.vocab_size
        )));
    }
    Ok(policy)
}

fn task_or_synth(cfg: &TrainConfig, task: Option<&Path>, seed: u64) -> Result<Task> {
    match task {
        Some(p) => Task::load(p),
        None => cfg.task_for_seed(seed),
    }
}

fn evaluate_cmd(
    cfg: &TrainConfig,
    checkpoint: &Path,
    opponent: Option<&Path>,
    task: Option<&Path>,
    seed: u64,
    samples: usize,
    out: &Path,
) -> Result<()> {
    let task = task_or_synth(cfg, task, seed)?;
    let policy = load_checked(checkpoint, &task)?;
    let opponent = opponent.map(|p| load_checked(p, &task)).transpose()?;
    let heldout = heldout_pairs(cfg, &task, seed)?;
    let ev = evaluate(
        &policy,
        &task.mdp,
        &task.reward,
        &heldout,
        opponent.as_ref(),
        samples,
        seed,
    )?;
    let mut bytes = serde_json::to_vec_pretty(&ev)?;
    bytes.push(b'\n');
    write_atomic(&out.join("evaluation.json"), &bytes)?;
    print!("{}", String::from_utf8_lossy(&bytes));
    Ok(())
}

pub fn format_oracle_table(reports: &[OracleReport]) -> String {
    let mut s = format!(
        "{:<28} {:>14} {:>10}  status\n",
        "check", "max-deviation", "tolerance"
    );
    for r in reports {
        let _ = writeln!(
            s,
            "{:<28} {:>14.3e} {:>10.0e}  {}",
            r.check_name,
            r.max_deviation,
            r.tolerance,
            if r.pass { "pass" } else { "FAIL" }
        );
    }
    s
}

fn oracle_check(
    config: Option<&Path>,
    task: Option<&Path>,
    seed: u64,
    reference: Option<&Path>,
    dpo: Option<&Path>,
    beta: Option<f64>,
    tolerance: Option<f64>,
) -> Result<()> {
    let cfg = config.map(TrainConfig::load).transpose()?;
    let task = match (task, &cfg) {
        (Some(p), _) => Task::load(p)?,
        (None, Some(c)) => c.task_for_seed(seed)?,
        (None, None) => return Err(Error::config("task", "pass --task or --config")),
    };
    let beta = beta.or(cfg.as_ref().map(|c| c.hyper.beta)).unwrap_or(0.1);
    if !(beta.is_finite() && beta > 0.0) {
        return Err(Error::config("beta", "must be finite and positive"));
    }
    let tol = match tolerance {
        Some(t) if !(t.is_finite() && t > 0.0) => {
            return Err(Error::config("tolerance", "must be finite and positive"))
        }
        Some(t) => OracleTolerances::uniform(t),
        None => OracleTolerances::default(),
    };
    let reference = match reference {
        Some(p) => load_checked(p, &task)?,
        None => TabularPolicy::uniform(task.mdp.vocab_size, PolicyRole::ReferenceTeacher),
    };
    let reports = identity_suite(&task.mdp, &task.reward, &reference, beta, &tol)?;
    print!("{}", format_oracle_table(&reports));
    if let Some(p) = dpo {
        let teacher = load_checked(p, &task)?;
        let sol = backward_induction(&task.mdp, &task.reward, &reference, beta)?;
        let mut gap: f64 = 0.0;
        for s in task.mdp.all_states()? {
            for (a, b) in teacher.log_probs(&s).iter().zip(sol.pi_star.log_probs(&s)) {
                gap = gap.max((a - b).abs());
            }
        }
        println!("dpo checkpoint max |log pi_dpo - log pi*|: {gap:.3e}");
    }
    let failed = reports.iter().filter(|r| !r.pass).count();
    if failed > 0 {
        return Err(Error::precondition(format!(
            "{failed} oracle check(s) failed"
        )));
    }
    Ok(())
}

fn sweep(cfg: &TrainConfig, grid: &GridSpec, out: &Path) -> Result<()> {
    let rows = run_sweep(cfg, grid)?;
    write_csv(&out.join("sweep.csv"), &rows)?;
    let cells = sweep_means(grid, &rows);
    write_csv(&out.join("sweep_means.csv"), &cells)?;
    for c in &cells {
        println!(
            "{} {}: mean true reward {:.6} reward accuracy {:.4}",
            c.param.name(),
            c.value,
            c.mean_true_reward,
            c.reward_accuracy
        );
    }
    Ok(())
}

fn cache_build(
    cfg: &TrainConfig,
    task: Option<&Path>,
    seed: u64,
    teachers: Option<(&Path, &Path)>,
    out: &Path,
) -> Result<()> {
    let task = task_or_synth(cfg, task, seed)?;
    let (dpo, reference) = match teachers {
        Some((d, r)) => (load_checked(d, &task)?, load_checked(r, &task)?),
        None => {
            let p = prepare(cfg, &task, seed)?;
            (p.dpo, p.reference)
        }
    };
    let states = task.mdp.all_states()?;
    let cache = build_advantage_cache(
        &dpo,
        &reference,
        &states,
        cfg.cache.k,
        cfg.cache.substitution,
    )?;
    let path = out.join("advantage.cache");
    cache.save(&path)?;
    println!(
        "{}: {} states, k = {}",
        path.display(),
        cache.len(),
        cache.k()
    );
    Ok(())
}

/// Markdown report of the summaries found in `dir`.
pub fn render_report(dir: &Path) -> Result<String> {
    let mut s = String::new();
    let summary_path = dir.join("summary.csv");
    let sweep_path = dir.join("sweep_means.csv");
    if !summary_path.exists() && !sweep_path.exists() {
        return Err(Error::precondition(format!(
            "no summary.csv or sweep_means.csv in {}",
            dir.display()
        )));
    }
    if summary_path.exists() {
        let rows: Vec<SummaryRow> = read_csv(&summary_path)?;
        let mut methods: Vec<&str> = rows.iter().map(|r| r.method.as_str()).collect();
        methods.dedup();
        s.push_str("| method | seeds | mean true reward | reward accuracy | KL to SFT student | queries |\n|---|---|---|---|---|---|\n");
        for m in methods {
            let rs: Vec<&SummaryRow> = rows.iter().filter(|r| r.method == m).collect();
            let n = rs.len() as f64;
            let ra: Vec<f64> = rs.iter().filter_map(|r| r.reward_accuracy).collect();
            let _ = writeln!(
                s,
                "| {m} | {} | {:.6} | {} | {:.6} | {} |",
                rs.len(),
                rs.iter().map(|r| r.mean_true_reward).sum::<f64>() / n,
                if ra.is_empty() {
                    "-".into()
                } else {
                    format!("{:.4}", ra.iter().sum::<f64>() / ra.len() as f64)
                },
                rs.iter().map(|r| r.kl_to_ref).sum::<f64>() / n,
                rs.iter().map(|r| r.queries_used).max().unwrap_or(0),
            );
        }
    }
    if sweep_path.exists() {
        let cells: Vec<SweepCell> = read_csv(&sweep_path)?;
        if cells.is_empty() {
            return Err(Error::precondition("sweep_means.csv is empty"));
        }
        if !s.is_empty() {
            s.push('\n');
        }
        let name = cells[0].param.name();
        let _ = writeln!(
            s,
            "| {name} | mean true reward | reward accuracy |\n|---|---|---|"
        );
        for c in &cells {
            let _ = writeln!(
                s,
                "| {} | {:.6} | {:.4} |",
                c.value, c.mean_true_reward, c.reward_accuracy
            );
        }
        let shape = sweep_shape(&cells, 3.0);
        let _ = writeln!(
            s,
            "\nreward accuracy non-decreasing up to its peak at {name} = {}: {}",
            shape.accuracy_peak,
            yes_no(shape.accuracy_rises_to_peak)
        );
        let _ = writeln!(
            s,
            "mean true reward peaks at {name} = {} (interior or right boundary: {})",
            shape.reward_peak,
            yes_no(shape.reward_peak_interior_or_right)
        );
        let decline = match shape.declines_after {
            Some(d) => yes_no(d).to_string(),
            None => "not measurable on this grid".to_string(),
        };
        let _ = writeln!(s, "decline beyond {name} = 3 reproduced: {decline}");
    }
    Ok(s)
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

fn report(dir: &Path) -> Result<()> {
    let text = render_report(dir)?;
    write_atomic(&dir.join("report.md"), text.as_bytes())?;
    print!("{text}");
    Ok(())
}

/// Reads back the records a `train` run wrote.
pub fn read_metrics(dir: &Path) -> Result<Vec<MetricsRecord>> {
    read_jsonl(&dir.join("metrics.jsonl"))
}
