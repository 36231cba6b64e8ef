use std::fmt::Write as _;

use super::data::Dataset;
use super::metrics::MetricsReport;
use super::train::{evaluate_best, train};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::MAX_DEPTH;

pub const DEFAULT_SEEDS: [u64; 3] = [1, 2, 3];

/// `1..=6` then every third depth up to the maximum.
pub fn depth_grid() -> Vec<usize> {
    (1..=6).chain((9..=MAX_DEPTH).step_by(3)).collect()
}

#[derive(Clone, Debug)]
pub struct SeedSummary {
    /// Held-out metrics of each seed's best checkpoint.
    pub runs: Vec<MetricsReport>,
    pub mean: f64,
    pub max: f64,
}

/// Independent runs, one per seed, scored on the test split when there is
/// one and on validation otherwise.
pub fn run_seeds(cfg: &RunConfig, data: &Dataset, seeds: &[u64], exec: Execution) -> Result<SeedSummary> {
    if seeds.is_empty() {
        return Err(Error::Config("no seeds given".into()));
    }
    let held_out = data.test.as_deref().unwrap_or(&data.val);
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut c = cfg.clone();
        c.train.seed = seed;
        let outcome = train(&c, data, exec)?;
        runs.push(evaluate_best(&outcome, held_out, exec)?.metrics);
    }
    let averages: Vec<f64> = runs.iter().map(|m| m.average).collect();
    Ok(SeedSummary {
        mean: averages.iter().sum::<f64>() / averages.len() as f64,
        max: averages.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        runs,
    })
}

#[derive(Clone, Debug)]
pub struct DepthRow {
    pub depth: usize,
    pub summary: SeedSummary,
}

pub fn sweep_depth(
    cfg: &RunConfig,
    data: &Dataset,
    depths: &[usize],
    seeds: &[u64],
    exec: Execution,
) -> Result<Vec<DepthRow>> {
    depths
        .iter()
        .map(|&depth| {
            let mut c = cfg.clone();
            c.model.depth = depth;
            c.validate()?;
            Ok(DepthRow {
                depth,
                summary: run_seeds(&c, data, seeds, exec)?,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[DepthRow]) -> String {
    let mut s = String::from("depth,mean,max\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{}", r.depth, r.summary.mean, r.summary.max);
    }
    s
}
