use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::mean;
use crate::objectives::{ALPHA_GRID, GAMMA_GRID};
use crate::pipeline::config::TrainConfig;
use crate::pipeline::run::{prepare, run_prepared};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    Alpha,
    Gamma,
}

/// `gamma`, `alpha`, or `name=v1,v2,...`.
impl SweepParam {
    pub fn name(&self) -> &'static str {
        match self {
            SweepParam::Alpha => "alpha",
            SweepParam::Gamma => "gamma",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub param: SweepParam,
    pub values: Vec<f64>,
}

impl FromStr for GridSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, values) = match s.split_once('=') {
            Some((n, v)) => (n.trim(), Some(v)),
            None => (s.trim(), None),
        };
        let param = match name {
            "alpha" => SweepParam::Alpha,
            "gamma" => SweepParam::Gamma,
            other => {
                return Err(Error::config(
                    "grid",
                    format!("unknown parameter `{other}`; expected alpha or gamma"),
                ))
            }
        };
        let values = match values {
            None => match param {
                SweepParam::Alpha => ALPHA_GRID.to_vec(),
                SweepParam::Gamma => GAMMA_GRID.to_vec(),
            },
            Some(v) => v
                .split(',')
                .map(|x| {
                    x.trim()
                        .parse::<f64>()
                        .ok()
                        .filter(|f| f.is_finite() && *f >= 0.0)
                        .ok_or_else(|| Error::config("grid", format!("bad grid value `{x}`")))
                })
                .collect::<Result<_>>()?,
        };
        if values.is_empty() {
            return Err(Error::config("grid", "empty grid"));
        }
        Ok(GridSpec { param, values })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: String,
    pub param: SweepParam,
    pub value: f64,
    pub seed: u64,
    pub mean_true_reward: f64,
    pub reward_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub param: SweepParam,
    pub value: f64,
    pub mean_true_reward: f64,
    pub reward_accuracy: f64,
}

/// One row per grid value and seed, in grid-major order regardless of
/// scheduling. Teachers are prepared once per seed.
pub fn run_sweep(cfg: &TrainConfig, grid: &GridSpec) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let per_seed: Vec<Vec<SweepRow>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| -> Result<Vec<SweepRow>> {
            let task = cfg.task_for_seed(seed)?;
            let prepared = prepare(cfg, &task, seed)?;
            grid.values
                .iter()
                .map(|&value| {
                    let mut c = cfg.clone();
                    match grid.param {
                        SweepParam::Alpha => c.hyper.alpha = value,
                        SweepParam::Gamma => c.hyper.gamma = value,
                    }
                    let out = run_prepared(&c, &task, &prepared, c.method)?;
                    let r = out.selected_record();
                    Ok(SweepRow {
                        method: c.method.name().into(),
                        param: grid.param,
                        value,
                        seed,
                        mean_true_reward: r.mean_true_reward,
                        reward_accuracy: r.reward_accuracy,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(grid.values.len() * cfg.seeds.len());
    for i in 0..grid.values.len() {
        for seed_rows in &per_seed {
            rows.push(seed_rows[i].clone());
        }
    }
    Ok(rows)
}

/// Per-value means across seeds, in grid order.
pub fn sweep_means(grid: &GridSpec, rows: &[SweepRow]) -> Vec<SweepCell> {
    grid.values
        .iter()
        .map(|&v| {
            let cell: Vec<&SweepRow> = rows.iter().filter(|r| r.value == v).collect();
            SweepCell {
                param: grid.param,
                value: v,
                mean_true_reward: mean(
                    &cell.iter().map(|r| r.mean_true_reward).collect::<Vec<_>>(),
                ),
                reward_accuracy: mean(
                    &cell
                        .iter()
                        .filter_map(|r| r.reward_accuracy)
                        .collect::<Vec<_>>(),
                ),
            }
        })
        .collect()
}

/// Shape of a sweep curve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepShape {
    /// Grid value with the highest Reward Accuracy (first on ties).
    pub accuracy_peak: f64,
    /// Reward Accuracy never decreases from the first grid value up to the peak.
    pub accuracy_rises_to_peak: bool,
    /// Grid value with the highest mean true reward (first on ties).
    pub reward_peak: f64,
    /// The reward maximum is not at the first grid value.
    pub reward_peak_interior_or_right: bool,
    /// Mean true reward at the largest value above `decline_after` is below the
    /// value at `decline_after`. `None` when the grid lacks such points.
    pub declines_after: Option<bool>,
}

pub fn sweep_shape(cells: &[SweepCell], decline_after: f64) -> SweepShape {
    let ra: Vec<f64> = cells.iter().map(|c| c.reward_accuracy).collect();
    let mr: Vec<f64> = cells.iter().map(|c| c.mean_true_reward).collect();
    let ra_peak = crate::math::argmax(&ra);
    let mr_peak = crate::math::argmax(&mr);
    let rises = ra[..=ra_peak].windows(2).all(|w| w[1] >= w[0]);
    let at = cells.iter().position(|c| c.value == decline_after);
    let declines_after = at.and_then(|i| {
        (i + 1 < cells.len())
            .then(|| cells[cells.len() - 1].mean_true_reward < cells[i].mean_true_reward)
    });
    SweepShape {
        accuracy_peak: cells[ra_peak].value,
        accuracy_rises_to_peak: rises,
        reward_peak: cells[mr_peak].value,
        reward_peak_interior_or_right: mr_peak > 0,
        declines_after,
    }
}
