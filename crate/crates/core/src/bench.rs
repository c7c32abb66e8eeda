//! Endpoint-reaching tasks and two-sample quality metrics.
//!
//! A task asks a sampler to land within radius `r` of a target; the success
//! rate over episodes is the reward the weight search maximizes.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::field::ScoreField;
use crate::oracle::{GaussianMixture, MixtureSpec};
use crate::rng;
use crate::sampler::{sample_endpoints, StreamSeeds};
use crate::schedule::Solver;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    #[default]
    SuccessRate,
    EnergyDistance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchTaskSpec {
    pub target: Vec<f64>,
    pub radius: f64,
    pub data: MixtureSpec,
    pub horizon: usize,
    #[serde(default = "default_solver")]
    pub solver: Solver,
    #[serde(default)]
    pub metric: Metric,
}

fn default_solver() -> Solver {
    Solver::Ddim
}

#[derive(Clone, Debug)]
pub struct BenchTask {
    pub target: Vec<f64>,
    pub radius: f64,
    pub data: Arc<GaussianMixture>,
    pub horizon: usize,
    pub solver: Solver,
    pub metric: Metric,
}

impl BenchTask {
    pub fn new(spec: &BenchTaskSpec) -> Result<Self> {
        let data = Arc::new(GaussianMixture::new(&spec.data)?);
        BenchTask::with_data(spec.target.clone(), spec.radius, data, spec.horizon, spec.solver, spec.metric)
    }

    pub fn with_data(
        target: Vec<f64>,
        radius: f64,
        data: Arc<GaussianMixture>,
        horizon: usize,
        solver: Solver,
        metric: Metric,
    ) -> Result<Self> {
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(Error::Construction(format!("success radius must be positive, got {radius}")));
        }
        if horizon == 0 {
            return Err(Error::Construction("horizon must be at least one step".into()));
        }
        check_dim(data.dim(), target.len())?;
        Ok(BenchTask {
            target,
            radius,
            data,
            horizon,
            solver,
            metric,
        })
    }

    pub fn dim(&self) -> usize {
        self.target.len()
    }

    pub fn succeeds(&self, x: &[f64]) -> bool {
        distance(x, &self.target) <= self.radius
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    /// Binomial standard error of the success rate.
    pub se: f64,
    pub energy_distance: Option<f64>,
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt()
}

pub fn success_stats(successes: usize, episodes: usize) -> (f64, f64) {
    if episodes == 0 {
        return (0.0, 0.0);
    }
    let p = successes as f64 / episodes as f64;
    (p, (p * (1.0 - p) / episodes as f64).sqrt())
}

/// Run `n_episodes` trajectories of `field` and score their endpoints.
pub fn run_bench(task: &BenchTask, field: &dyn ScoreField, n_episodes: usize, seeds: StreamSeeds) -> Result<BenchResult> {
    check_dim(task.dim(), field.dim())?;
    let ids: Vec<u64> = (0..n_episodes as u64).collect();
    let ends = sample_endpoints(field, task.solver, task.horizon, &ids, seeds)?;
    let successes = ends.iter().filter(|x| task.succeeds(x)).count();
    let energy = match task.metric {
        Metric::EnergyDistance if n_episodes > 0 => {
            let mut s = rng::stream(seeds.noise, &[rng::tag::SUITE]);
            let reference = task.data.sample(&mut s, n_episodes);
            Some(energy_distance(&ends, &reference)?)
        }
        _ => None,
    };
    let (success_rate, se) = success_stats(successes, n_episodes);
    Ok(BenchResult {
        episodes: n_episodes,
        successes,
        success_rate,
        se,
        energy_distance: energy,
    })
}

/// Points stored coordinate-major for tight pairwise loops.
struct Columns {
    cols: Vec<Vec<f64>>,
    n: usize,
}

impl Columns {
    fn new(points: &[&[f64]], d: usize) -> Self {
        Columns {
            cols: (0..d).map(|j| points.iter().map(|p| p[j]).collect()).collect(),
            n: points.len(),
        }
    }

    /// Sum of distances between every point here and every point in `other`.
    fn between(&self, other: &Columns) -> f64 {
        (0..self.n).map(|i| other.row_sum(&self.cols_at(i), 0)).sum()
    }

    fn cols_at(&self, i: usize) -> Vec<f64> {
        self.cols.iter().map(|c| c[i]).collect()
    }

    /// `sum_{k >= from} |p - x_k|`.
    fn row_sum(&self, p: &[f64], from: usize) -> f64 {
        let mut acc = vec![0.0; self.n - from.min(self.n)];
        for (c, pj) in self.cols.iter().zip(p) {
            for (a, v) in acc.iter_mut().zip(&c[from..]) {
                let diff = v - pj;
                *a += diff * diff;
            }
        }
        acc.iter().map(|v| v.sqrt()).sum()
    }
}

fn check_batches(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<usize> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Evaluation("energy distance needs two nonempty batches".into()));
    }
    let d = a[0].len();
    for p in a.iter().chain(b) {
        check_dim(d, p.len())?;
    }
    Ok(d)
}

fn energy_from_sums(sxy: f64, sxx: f64, syy: f64, n: usize, m: usize) -> f64 {
    let (n, m) = (n as f64, m as f64);
    2.0 * sxy / (n * m) - sxx / (n * n) - syy / (m * m)
}

/// Energy distance `2 E|X - Y| - E|X - X'| - E|Y - Y'|` with all pairs
/// (V-statistic), so identical batches give exactly zero.
pub fn energy_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let d = check_batches(a, b)?;
    let ca = Columns::new(&a.iter().map(|p| p.as_slice()).collect::<Vec<_>>(), d);
    let cb = Columns::new(&b.iter().map(|p| p.as_slice()).collect::<Vec<_>>(), d);
    // Summing every term the same way makes identical batches cancel exactly.
    Ok(energy_from_sums(ca.between(&cb), ca.between(&ca), cb.between(&cb), a.len(), b.len()).max(0.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermutationTest {
    pub statistic: f64,
    /// 95th percentile of the permuted statistics.
    pub threshold: f64,
    pub p_value: f64,
    pub permutations: usize,
}

impl PermutationTest {
    pub fn rejects(&self) -> bool {
        self.statistic > self.threshold
    }
}

/// Permutation test of equal laws based on the energy distance.
///
/// Writing `m` for the 0/1 membership of the pooled points in the first group
/// and `D` for the pooled distance matrix, each labeling needs only `m' D m`
/// and `m' r` with `r = D 1`. The matrix is generated tile by tile and every
/// labeling (the observed one first) is scored against the same tile through
/// one matrix product, so `D` is never stored.
pub fn energy_permutation_test(a: &[Vec<f64>], b: &[Vec<f64>], permutations: usize, seed: u64) -> Result<PermutationTest> {
    check_batches(a, b)?;
    let (n, m) = (a.len(), b.len());
    let pooled: Vec<&[f64]> = a.iter().chain(b).map(|p| p.as_slice()).collect();
    let total = n + m;
    let labelings = permutations + 1;

    let mut membership = DMatrix::<f64>::zeros(total, labelings);
    membership.column_mut(0).rows_mut(0, n).fill(1.0);
    let mut s = rng::stream(seed, &[rng::tag::SUITE, 1]);
    let mut idx: Vec<usize> = (0..total).collect();
    for p in 1..labelings {
        idx.shuffle(&mut s);
        for &i in &idx[..n] {
            membership[(i, p)] = 1.0;
        }
    }

    const TILE: usize = 512;
    let mut within_first = vec![0.0; labelings];
    let mut row_sums = vec![0.0; total];
    let mut tile = DMatrix::<f64>::zeros(TILE, TILE);
    for i0 in (0..total).step_by(TILE) {
        let ni = TILE.min(total - i0);
        for j0 in (i0..total).step_by(TILE) {
            let nj = TILE.min(total - j0);
            let mut dist = tile.view_mut((0, 0), (ni, nj));
            for j in 0..nj {
                let q = pooled[j0 + j];
                for i in 0..ni {
                    let p = pooled[i0 + i];
                    dist[(i, j)] = p.iter().zip(q).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt();
                }
            }
            let projected = &dist * membership.rows(j0, nj);
            // Off-diagonal tiles stand for themselves and their transpose.
            let factor = if i0 == j0 { 1.0 } else { 2.0 };
            for (p, acc) in within_first.iter_mut().enumerate() {
                let lhs = membership.view((i0, p), (ni, 1));
                *acc += factor * lhs.dot(&projected.view((0, p), (ni, 1)));
            }
            for i in 0..ni {
                row_sums[i0 + i] += dist.row(i).sum();
            }
            if i0 != j0 {
                for j in 0..nj {
                    row_sums[j0 + j] += dist.column(j).sum();
                }
            }
        }
    }

    let stats: Vec<f64> = (0..labelings)
        .map(|p| {
            let col = membership.column(p);
            let first: f64 = row_sums.iter().zip(col.iter()).map(|(r, w)| r * w).sum();
            let second: f64 = row_sums.iter().zip(col.iter()).map(|(r, w)| r * (1.0 - w)).sum();
            let sxx = within_first[p];
            let sxy = first - sxx;
            let syy = second - sxy;
            energy_from_sums(sxy, sxx, syy, n, m)
        })
        .collect();
    let statistic = stats[0];
    let mut permuted = stats[1..].to_vec();
    let exceed = permuted.iter().filter(|v| **v >= statistic).count();
    permuted.sort_by(f64::total_cmp);
    let threshold = if permuted.is_empty() {
        f64::INFINITY
    } else {
        permuted[((0.95 * permutations as f64).ceil() as usize).clamp(1, permutations) - 1]
    };
    Ok(PermutationTest {
        statistic,
        threshold,
        p_value: (exceed + 1) as f64 / (permutations + 1) as f64,
        permutations,
    })
}
