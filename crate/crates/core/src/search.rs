//! Test-time grid search over the weight of a two-member convex composition.
//!
//! Every cell of the grid shares the initial draws of its episodes (one `init`
//! seed for the whole sweep) and gets its own dynamics-noise seed derived from
//! the master seed and the cell index. Differences between cells are then due
//! to the weight, not to where the episodes started.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bench::{run_bench, success_stats, BenchTask};
use crate::compose::ComposedField;
use crate::error::{Error, Result};
use crate::field::FieldRef;
use crate::rng;
use crate::sampler::{fmt_f64, StreamSeeds};
use crate::svg::{self, Series};
use crate::theory::weight_grid;

pub const DEFAULT_GRID_STEP: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub w: f64,
    pub episodes: usize,
    pub successes: usize,
    pub mean_reward: f64,
    pub se: f64,
    pub seeds: StreamSeeds,
    /// Set when the evaluator failed for this cell; such cells never win.
    pub error: Option<String>,
}

impl PoolEntry {
    pub fn is_valid(&self) -> bool {
        self.error.is_none()
    }
}

/// Rewards per weight, ordered by weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardPool {
    pub entries: Vec<PoolEntry>,
}

impl RewardPool {
    /// Best valid cell; ties go to the smallest weight.
    pub fn best(&self) -> Option<&PoolEntry> {
        let mut best: Option<&PoolEntry> = None;
        for e in self.entries.iter().filter(|e| e.is_valid()) {
            match best {
                Some(b) if e.mean_reward <= b.mean_reward => {}
                _ => best = Some(e),
            }
        }
        best
    }

    pub fn get(&self, w: f64) -> Option<&PoolEntry> {
        self.entries.iter().find(|e| (e.w - w).abs() < 1e-12)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("w,episodes,successes,mean_reward,se,valid\n");
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                fmt_f64(e.w),
                e.episodes,
                e.successes,
                fmt_f64(e.mean_reward),
                fmt_f64(e.se),
                e.is_valid()
            );
        }
        out
    }

    /// Reward curve with standard-error bars.
    pub fn to_svg(&self, title: &str) -> String {
        let points = self
            .entries
            .iter()
            .filter(|e| e.is_valid())
            .map(|e| (e.w, e.mean_reward, e.se))
            .collect();
        svg::chart(
            title,
            "weight of first member",
            "success rate",
            &[Series {
                name: "R(w)".into(),
                points,
                line: true,
            }],
        )
    }
}

/// Outcome of evaluating one weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellOutcome {
    pub episodes: usize,
    pub successes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub w_star: f64,
    pub best_reward: f64,
    pub pool: RewardPool,
}

/// Seeds of cell `index` in a sweep with master seed `seed`.
pub fn cell_seeds(seed: u64, index: usize) -> StreamSeeds {
    StreamSeeds {
        init: rng::derive_seed(seed, &[rng::tag::INIT]),
        noise: rng::derive_seed(seed, &[rng::tag::CELL, index as u64]),
    }
}

/// Evaluate every weight on the grid and return the best one.
pub fn grid_search<F>(evaluate: F, grid_step: f64, episodes: usize, seed: u64) -> Result<SearchResult>
where
    F: Fn(f64, usize, StreamSeeds) -> Result<CellOutcome> + Sync,
{
    let grid = weight_grid(grid_step)?;
    let entries: Vec<PoolEntry> = grid
        .par_iter()
        .enumerate()
        .map(|(i, &w)| {
            let seeds = cell_seeds(seed, i);
            match evaluate(w, episodes, seeds) {
                Ok(o) => {
                    let (mean_reward, se) = success_stats(o.successes, o.episodes);
                    PoolEntry {
                        w,
                        episodes: o.episodes,
                        successes: o.successes,
                        mean_reward,
                        se,
                        seeds,
                        error: None,
                    }
                }
                Err(e) => PoolEntry {
                    w,
                    episodes: 0,
                    successes: 0,
                    mean_reward: 0.0,
                    se: 0.0,
                    seeds,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    let pool = RewardPool { entries };
    let best = pool
        .best()
        .ok_or_else(|| Error::Evaluation("every cell of the sweep failed".into()))?;
    Ok(SearchResult {
        w_star: best.w,
        best_reward: best.mean_reward,
        pool: pool.clone(),
    })
}

/// Evaluator running a bench task on `w first + (1 - w) second`.
pub fn bench_evaluator<'a>(
    task: &'a BenchTask,
    first: &'a FieldRef,
    second: &'a FieldRef,
) -> impl Fn(f64, usize, StreamSeeds) -> Result<CellOutcome> + Sync + 'a {
    move |w, episodes, seeds| {
        let composed = ComposedField::convex(vec![first.clone(), second.clone()], vec![w, 1.0 - w])?;
        let r = run_bench(task, &composed, episodes, seeds)?;
        Ok(CellOutcome {
            episodes: r.episodes,
            successes: r.successes,
        })
    }
}

/// Unimodality of `R(w)` up to `k` standard errors: no rise after a fall by
/// more than the combined error bars.
pub fn is_unimodal(pool: &RewardPool, k: f64) -> bool {
    let v: Vec<&PoolEntry> = pool.entries.iter().filter(|e| e.is_valid()).collect();
    let Some(peak) = pool.best() else {
        return true;
    };
    let p = v.iter().position(|e| e.w == peak.w).expect("peak is in the pool");
    let tolerance = |a: &PoolEntry, b: &PoolEntry| k * (a.se * a.se + b.se * b.se).sqrt();
    // Left of the peak must not drop; right of the peak must not rise.
    let left = (1..=p).all(|i| v[i].mean_reward + tolerance(v[i], v[i - 1]) >= v[i - 1].mean_reward);
    let right = (p + 1..v.len()).all(|i| v[i].mean_reward <= v[i - 1].mean_reward + tolerance(v[i], v[i - 1]));
    left && right
}
