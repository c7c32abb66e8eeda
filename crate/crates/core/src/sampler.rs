//! Reverse-time generation and paired simulation.
//!
//! Trajectories start from `x(1) ~ N(0, I)` and walk a uniform grid down to
//! `t = 0`. Every trajectory owns three derived streams keyed by its id: the
//! initial draw, the solver noise, and the field noise context. Results are
//! therefore independent of batching and of the number of worker threads.

use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::field::{eval_batch_as, FieldRef, NoiseCtx, ScoreField};
use crate::param::PredictionKind;
use crate::rng::{self, Stream};
use crate::schedule::{step_coefficients, uniform_grid, NoiseSchedule, Solver};

/// Trajectories are advanced in lockstep batches of this size.
const CHUNK: usize = 512;

/// Seeds for the initial draw and for everything random after it.
///
/// Sharing `init` while varying `noise` gives runs with common starting
/// points but independent dynamics noise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamSeeds {
    pub init: u64,
    pub noise: u64,
}

impl StreamSeeds {
    pub fn from_master(seed: u64) -> Self {
        StreamSeeds {
            init: rng::derive_seed(seed, &[rng::tag::INIT]),
            noise: rng::derive_seed(seed, &[rng::tag::SOLVER]),
        }
    }

    pub fn initial_state(&self, trajectory: u64, dim: usize) -> Vec<f64> {
        let mut s = rng::stream(self.init, &[rng::tag::INIT, trajectory]);
        rng::standard_normal_vec(&mut s, dim)
    }

    fn solver_stream(&self, trajectory: u64) -> Stream {
        rng::stream(self.noise, &[rng::tag::SOLVER, trajectory])
    }

    fn field_ctx(&self, trajectory: u64) -> NoiseCtx {
        NoiseCtx::new(self.noise, trajectory)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: u64,
    pub solver: Solver,
    pub seeds: StreamSeeds,
    /// Strictly decreasing from 1 to 0.
    pub grid: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn terminal(&self) -> &[f64] {
        self.states.last().expect("trajectory has at least one state")
    }
}

struct Walker {
    x: Vec<f64>,
    ctx: NoiseCtx,
    solver_rng: Stream,
    states: Option<Vec<Vec<f64>>>,
}

/// How one grid step is taken.
enum StepForm {
    /// `x += (t_to - t_from) W(t_from) v`, used by flow-euler so that velocity
    /// fields never need a conversion at the singular `t = 1` node.
    Velocity,
    Affine,
}

fn validate(field: &dyn ScoreField, n_steps: usize) -> Result<()> {
    if n_steps == 0 {
        return Err(Error::Domain {
            what: "n_steps",
            value: 0.0,
            lo: 1.0,
            hi: f64::INFINITY,
        });
    }
    field.schedule().validate()
}

fn run_chunk(
    field: &dyn ScoreField,
    solver: Solver,
    grid: &[f64],
    ids: &[u64],
    seeds: StreamSeeds,
    record: bool,
) -> Result<Vec<Walker>> {
    let d = field.dim();
    let sched = *field.schedule();
    let mut walkers: Vec<Walker> = ids
        .iter()
        .map(|&id| {
            let x = seeds.initial_state(id, d);
            Walker {
                states: record.then(|| {
                    let mut v = Vec::with_capacity(grid.len());
                    v.push(x.clone());
                    v
                }),
                x,
                ctx: seeds.field_ctx(id),
                solver_rng: seeds.solver_stream(id),
            }
        })
        .collect();
    let form = if solver == Solver::FlowEuler {
        StepForm::Velocity
    } else {
        StepForm::Affine
    };
    let mut xs: Vec<Vec<f64>> = walkers.iter().map(|w| w.x.clone()).collect();
    let mut ctxs: Vec<NoiseCtx> = walkers.iter().map(|w| w.ctx.clone()).collect();
    for k in 0..grid.len() - 1 {
        let (t_from, t_to) = (grid[k], grid[k + 1]);
        for c in ctxs.iter_mut() {
            c.set_step(k as u64);
        }
        match form {
            StepForm::Velocity => {
                let v = eval_batch_as(field, PredictionKind::Velocity, t_from, &xs, &mut ctxs)?;
                let scale = (t_to - t_from) * sched.velocity_time_scale(t_from);
                for (x, vi) in xs.iter_mut().zip(&v) {
                    for (xj, vj) in x.iter_mut().zip(vi) {
                        *xj += scale * vj;
                    }
                }
            }
            StepForm::Affine => {
                let coeffs = step_coefficients(&sched, solver, t_from, t_to)?;
                let s = eval_batch_as(field, PredictionKind::Score, t_from, &xs, &mut ctxs)?;
                let stochastic = coeffs.is_stochastic();
                for ((x, si), w) in xs.iter_mut().zip(&s).zip(walkers.iter_mut()) {
                    if stochastic {
                        let xi = rng::standard_normal_vec(&mut w.solver_rng, d);
                        coeffs.apply(x, si, Some(&xi));
                    } else {
                        coeffs.apply(x, si, None);
                    }
                }
            }
        }
        if record {
            for (w, x) in walkers.iter_mut().zip(&xs) {
                w.states.as_mut().expect("recording").push(x.clone());
            }
        }
    }
    for ((w, x), c) in walkers.iter_mut().zip(xs).zip(ctxs) {
        w.x = x;
        w.ctx = c;
    }
    Ok(walkers)
}

fn run(
    field: &dyn ScoreField,
    solver: Solver,
    n_steps: usize,
    ids: &[u64],
    seeds: StreamSeeds,
    record: bool,
) -> Result<Vec<Walker>> {
    validate(field, n_steps)?;
    let grid = uniform_grid(n_steps);
    let chunks: Vec<Result<Vec<Walker>>> = ids
        .par_chunks(CHUNK)
        .map(|c| run_chunk(field, solver, &grid, c, seeds, record))
        .collect();
    let mut out = Vec::with_capacity(ids.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Sample `n_samples` full trajectories with ids `0..n_samples`.
pub fn sample(
    field: &dyn ScoreField,
    solver: Solver,
    n_steps: usize,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    let ids: Vec<u64> = (0..n_samples as u64).collect();
    sample_with(field, solver, n_steps, &ids, StreamSeeds::from_master(seed))
}

pub fn sample_with(
    field: &dyn ScoreField,
    solver: Solver,
    n_steps: usize,
    ids: &[u64],
    seeds: StreamSeeds,
) -> Result<Vec<Trajectory>> {
    let grid = uniform_grid(n_steps);
    Ok(run(field, solver, n_steps, ids, seeds, true)?
        .into_iter()
        .zip(ids)
        .map(|(w, &id)| Trajectory {
            id,
            solver,
            seeds,
            grid: grid.clone(),
            states: w.states.expect("recording"),
        })
        .collect())
}

/// Terminal states only, in id order.
pub fn sample_endpoints(
    field: &dyn ScoreField,
    solver: Solver,
    n_steps: usize,
    ids: &[u64],
    seeds: StreamSeeds,
) -> Result<Vec<Vec<f64>>> {
    Ok(run(field, solver, n_steps, ids, seeds, false)?
        .into_iter()
        .map(|w| w.x)
        .collect())
}

/// Constant in front of `g^2 s` in the reverse-time drift.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DriftConvention {
    /// `F = f x - g^2 s / 2`, the probability-flow ODE.
    ProbabilityFlow,
    /// `F = f x - g^2 s`.
    ReverseDrift,
}

/// `dx/dt = F(t, x, s) = f(t) x - k g(t)^2 s`, affine in `s`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OdeDynamics {
    pub schedule: NoiseSchedule,
    pub convention: DriftConvention,
}

impl OdeDynamics {
    pub fn probability_flow(schedule: NoiseSchedule) -> Self {
        OdeDynamics {
            schedule,
            convention: DriftConvention::ProbabilityFlow,
        }
    }

    pub fn score_coefficient(&self) -> f64 {
        match self.convention {
            DriftConvention::ProbabilityFlow => 0.5,
            DriftConvention::ReverseDrift => 1.0,
        }
    }

    pub fn drift(&self, t: f64, x: &[f64], s: &[f64]) -> Vec<f64> {
        let f = self.schedule.drift_coefficient(t);
        let k = self.score_coefficient() * self.schedule.diffusion_sq(t);
        x.iter().zip(s).map(|(xi, si)| f * xi - k * si).collect()
    }

    /// Lipschitz constant of `F` in `x` at fixed `s`.
    pub fn lipschitz_x(&self, t: f64) -> f64 {
        self.schedule.drift_coefficient(t).abs()
    }

    /// Lipschitz constant of `F` in `s`.
    pub fn lipschitz_s(&self, t: f64) -> f64 {
        self.score_coefficient() * self.schedule.diffusion_sq(t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Integrator {
    Euler,
    Rk4,
}

/// Dynamics shared by both members of a simulated pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PairDynamics {
    /// One of the built-in solvers; stochastic solvers share the noise stream.
    Solver { solver: Solver },
    Ode {
        dynamics: OdeDynamics,
        integrator: Integrator,
    },
}

#[derive(Clone, Debug)]
pub struct PairResult {
    pub reference: Trajectory,
    pub perturbed: Trajectory,
    pub terminal_error: f64,
}

fn ode_step(
    field: &dyn ScoreField,
    dynamics: &OdeDynamics,
    integrator: Integrator,
    t: f64,
    h: f64,
    x: &[f64],
    ctx: &mut NoiseCtx,
) -> Result<Vec<f64>> {
    let rhs = |t: f64, x: &[f64], ctx: &mut NoiseCtx| -> Result<Vec<f64>> {
        let s = crate::field::score(field, t, x, ctx)?;
        Ok(dynamics.drift(t, x, &s))
    };
    let axpy = |x: &[f64], a: f64, k: &[f64]| -> Vec<f64> {
        x.iter().zip(k).map(|(xi, ki)| xi + a * ki).collect()
    };
    Ok(match integrator {
        Integrator::Euler => axpy(x, h, &rhs(t, x, ctx)?),
        Integrator::Rk4 => {
            let k1 = rhs(t, x, ctx)?;
            let k2 = rhs(t + 0.5 * h, &axpy(x, 0.5 * h, &k1), ctx)?;
            let k3 = rhs(t + 0.5 * h, &axpy(x, 0.5 * h, &k2), ctx)?;
            let k4 = rhs(t + h, &axpy(x, h, &k3), ctx)?;
            x.iter()
                .enumerate()
                .map(|(i, xi)| xi + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
                .collect()
        }
    })
}

fn integrate_ode(
    field: &dyn ScoreField,
    dynamics: &OdeDynamics,
    integrator: Integrator,
    grid: &[f64],
    x0: Vec<f64>,
    mut ctx: NoiseCtx,
) -> Result<Vec<Vec<f64>>> {
    let mut states = Vec::with_capacity(grid.len());
    states.push(x0);
    for k in 0..grid.len() - 1 {
        ctx.set_step(k as u64);
        let x = states.last().expect("nonempty");
        let next = ode_step(field, dynamics, integrator, grid[k], grid[k + 1] - grid[k], x, &mut ctx)?;
        states.push(next);
    }
    Ok(states)
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt()
}

/// Integrate the oracle and the estimator from the same initial state, with the
/// same grid and, for stochastic solvers, the same noise stream.
pub fn simulate_pair(
    oracle: &dyn ScoreField,
    estimator: &dyn ScoreField,
    dynamics: &PairDynamics,
    n_steps: usize,
    trajectory: u64,
    seeds: StreamSeeds,
) -> Result<PairResult> {
    check_dim(oracle.dim(), estimator.dim())?;
    validate(oracle, n_steps)?;
    let grid = uniform_grid(n_steps);
    let (reference, perturbed) = match dynamics {
        PairDynamics::Solver { solver } => {
            let r = sample_with(oracle, *solver, n_steps, &[trajectory], seeds)?;
            let p = sample_with(estimator, *solver, n_steps, &[trajectory], seeds)?;
            (r.into_iter().next().expect("one"), p.into_iter().next().expect("one"))
        }
        PairDynamics::Ode { dynamics, integrator } => {
            let x0 = seeds.initial_state(trajectory, oracle.dim());
            let tag = match integrator {
                Integrator::Euler => Solver::PfOdeEuler,
                Integrator::Rk4 => Solver::PfOdeEuler,
            };
            let mk = |states| Trajectory {
                id: trajectory,
                solver: tag,
                seeds,
                grid: grid.clone(),
                states,
            };
            let r = integrate_ode(oracle, dynamics, *integrator, &grid, x0.clone(), seeds.field_ctx(trajectory))?;
            let p = integrate_ode(estimator, dynamics, *integrator, &grid, x0, seeds.field_ctx(trajectory))?;
            (mk(r), mk(p))
        }
    };
    let terminal_error = distance(reference.terminal(), perturbed.terminal());
    Ok(PairResult {
        reference,
        perturbed,
        terminal_error,
    })
}

/// `n_pairs` independent pairs with ids `0..n_pairs`, in id order.
pub fn simulate_pairs(
    oracle: &FieldRef,
    estimator: &FieldRef,
    dynamics: &PairDynamics,
    n_steps: usize,
    n_pairs: usize,
    seed: u64,
) -> Result<Vec<PairResult>> {
    let seeds = StreamSeeds::from_master(seed);
    (0..n_pairs as u64)
        .into_par_iter()
        .map(|id| simulate_pair(oracle.as_ref(), estimator.as_ref(), dynamics, n_steps, id, seeds))
        .collect()
}

/// One JSON object per line.
pub fn write_jsonl<W: Write>(mut out: W, trajectories: &[Trajectory]) -> Result<()> {
    for t in trajectories {
        serde_json::to_writer(&mut out, t)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<Trajectory>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Format a float so that it parses back to the same value.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// CSV of endpoints, `id,x0,x1,...`; the header is written even when empty.
pub fn write_endpoints_csv<W: Write>(mut out: W, dim: usize, rows: &[(u64, Vec<f64>)]) -> Result<()> {
    let mut header = String::from("id");
    for i in 0..dim {
        header.push_str(&format!(",x{i}"));
    }
    writeln!(out, "{header}")?;
    for (id, x) in rows {
        check_dim(dim, x.len())?;
        let cols: Vec<String> = x.iter().map(|v| fmt_f64(*v)).collect();
        writeln!(out, "{id},{}", cols.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compose::ComposedField;
    use crate::oracle::{make_estimator, Bias, EstimatorSpec, GaussianMixture, OracleField};
    use crate::param::{as_kind, FnField};
    use std::sync::Arc;

    const VP: NoiseSchedule = NoiseSchedule::VpLinear {
        beta_min: 0.1,
        beta_max: 20.0,
    };

    fn oracle(mix: GaussianMixture) -> FieldRef {
        Arc::new(OracleField::new(Arc::new(mix), VP))
    }

    #[test]
    fn zero_velocity_flow_is_the_identity() {
        let f = FnField::new(3, NoiseSchedule::FlowLinear, PredictionKind::Velocity, |_, _| vec![0.0; 3]);
        let tr = sample(&f, Solver::FlowEuler, 1, 10, 5).unwrap();
        for t in &tr {
            assert_eq!(t.states[0], t.states[1]);
            assert_eq!(t.grid, vec![1.0, 0.0]);
        }
    }

    #[test]
    fn grid_and_states_have_equal_length() {
        let f = oracle(GaussianMixture::standard_normal(2));
        for t in sample(f.as_ref(), Solver::Ddpm, 7, 3, 1).unwrap() {
            assert_eq!(t.grid.len(), 8);
            assert_eq!(t.states.len(), 8);
            assert!(t.grid.windows(2).all(|w| w[0] > w[1]));
        }
    }

    #[test]
    fn zero_steps_are_rejected() {
        let f = oracle(GaussianMixture::standard_normal(2));
        assert!(sample(f.as_ref(), Solver::Ddim, 0, 3, 1).is_err());
    }

    #[test]
    fn deterministic_solvers_reproduce_bit_for_bit() {
        let f = oracle(GaussianMixture::isotropic(vec![1.0, -1.0], 0.5).unwrap());
        for solver in [Solver::Ddim, Solver::PfOdeEuler, Solver::Ddpm] {
            let a = sample(f.as_ref(), solver, 20, 50, 9).unwrap();
            let b = sample(f.as_ref(), solver, 20, 50, 9).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn results_do_not_depend_on_batching() {
        let f = oracle(GaussianMixture::standard_normal(2));
        let seeds = StreamSeeds::from_master(4);
        let ids: Vec<u64> = (0..1200).collect();
        let all = sample_endpoints(f.as_ref(), Solver::Ddpm, 10, &ids, seeds).unwrap();
        let one = sample_endpoints(f.as_ref(), Solver::Ddpm, 10, &[777], seeds).unwrap();
        assert_eq!(all[777], one[0]);
    }

    #[test]
    fn degenerate_composition_reproduces_its_first_member() {
        let a = oracle(GaussianMixture::isotropic(vec![1.0, 0.0], 0.5).unwrap());
        let b = oracle(GaussianMixture::isotropic(vec![-2.0, 1.0], 1.5).unwrap());
        let c = ComposedField::convex(vec![a.clone(), b], vec![1.0, 0.0]).unwrap();
        for solver in [Solver::Ddim, Solver::Ddpm] {
            let x = sample(a.as_ref(), solver, 25, 20, 3).unwrap();
            let y = sample(&c, solver, 25, 20, 3).unwrap();
            for (p, q) in x.iter().zip(&y) {
                assert_eq!(p.states, q.states);
            }
        }
    }

    #[test]
    fn velocity_native_field_matches_score_native_run() {
        let s = oracle(GaussianMixture::standard_normal(2));
        let v = as_kind(s.clone(), PredictionKind::Velocity);
        let a = sample(s.as_ref(), Solver::PfOdeEuler, 50, 200, 8).unwrap();
        let b = sample(v.as_ref(), Solver::PfOdeEuler, 50, 200, 8).unwrap();
        let mean = |tr: &[Trajectory]| -> Vec<f64> {
            let mut m = vec![0.0; 2];
            for t in tr {
                for (mi, xi) in m.iter_mut().zip(t.terminal()) {
                    *mi += xi / tr.len() as f64;
                }
            }
            m
        };
        let (ma, mb) = (mean(&a), mean(&b));
        for i in 0..2 {
            assert!((ma[i] - mb[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn identical_fields_give_zero_pair_error() {
        let f = oracle(GaussianMixture::standard_normal(2));
        for dynamics in [
            PairDynamics::Solver { solver: Solver::Ddpm },
            PairDynamics::Ode {
                dynamics: OdeDynamics::probability_flow(VP),
                integrator: Integrator::Euler,
            },
        ] {
            let p = simulate_pair(f.as_ref(), f.as_ref(), &dynamics, 50, 3, StreamSeeds::from_master(1)).unwrap();
            assert_eq!(p.terminal_error, 0.0);
        }
    }

    /// Terminal error of the probability-flow pair for `N(0, lambda I)` with a
    /// constant bias `b`: `e(0) = b sqrt(lambda) / 2 * int beta / sqrt(alpha^2 lambda + sigma^2) dt`.
    fn closed_form_error(lambda: f64, b: f64) -> f64 {
        let n = 200_000;
        let h = 1.0 / n as f64;
        let g = |t: f64| {
            let (a, s) = VP.alpha_sigma(t).unwrap();
            VP.beta(t) / (a * a * lambda + s * s).sqrt()
        };
        // Composite Simpson.
        let mut acc = g(0.0) + g(1.0);
        for i in 1..n {
            acc += g(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        0.5 * b * lambda.sqrt() * acc * h / 3.0
    }

    fn biased_pair(lambda: f64, b: f64, integrator: Integrator, n: usize) -> f64 {
        let base = Arc::new(GaussianMixture::isotropic(vec![0.0], lambda).unwrap());
        let o = OracleField::new(base.clone(), VP);
        let e = make_estimator(&EstimatorSpec::exact(base).with_bias(Bias::Constant { b: vec![b] }), VP, 0).unwrap();
        let dynamics = PairDynamics::Ode {
            dynamics: OdeDynamics::probability_flow(VP),
            integrator,
        };
        let p = simulate_pair(&o, &e, &dynamics, n, 0, StreamSeeds::from_master(2)).unwrap();
        p.perturbed.terminal()[0] - p.reference.terminal()[0]
    }

    #[test]
    fn linear_perturbation_matches_closed_form_with_rk4() {
        for lambda in [0.25, 1.0, 3.0] {
            let want = closed_form_error(lambda, 0.1);
            let got = biased_pair(lambda, 0.1, Integrator::Rk4, 10_000);
            assert!(((got - want) / want).abs() <= 1e-6, "lambda {lambda}: {got} vs {want}");
        }
    }

    #[test]
    fn euler_pair_error_converges_at_first_order() {
        let lambda = 0.25;
        let want = closed_form_error(lambda, 0.1);
        let errs: Vec<f64> = [1000, 2000, 4000]
            .iter()
            .map(|&n| (biased_pair(lambda, 0.1, Integrator::Euler, n) - want).abs())
            .collect();
        let order = (errs[0] / errs[1]).log2();
        assert!((0.8..=2.5).contains(&order), "order {order}");
        assert!(errs[2] / want.abs() < 1e-3);
    }

    #[test]
    fn mean_shift_error_is_linear_in_the_shift() {
        let base = Arc::new(GaussianMixture::isotropic(vec![0.5, -0.5], 0.7).unwrap());
        let o = OracleField::new(base.clone(), VP);
        let dynamics = PairDynamics::Ode {
            dynamics: OdeDynamics::probability_flow(VP),
            integrator: Integrator::Euler,
        };
        let errs: Vec<f64> = [1e-3, 1e-2, 1e-1]
            .iter()
            .map(|&d| {
                let spec = EstimatorSpec::exact(base.clone()).with_bias(Bias::MeanShift { delta: vec![d, 0.5 * d] });
                let e = make_estimator(&spec, VP, 0).unwrap();
                simulate_pair(&o, &e, &dynamics, 200, 0, StreamSeeds::from_master(5)).unwrap().terminal_error
            })
            .collect();
        // Slope of log error against log shift.
        let slope = (errs[2] / errs[0]).log10() / 2.0;
        assert!((slope - 1.0).abs() < 0.02, "slope {slope}");
    }

    #[test]
    fn deterministic_solver_converges_in_step_count() {
        let f = oracle(GaussianMixture::isotropic(vec![1.0, -0.5], 0.3).unwrap());
        let seeds = StreamSeeds::from_master(12);
        let run = |n| sample_endpoints(f.as_ref(), Solver::PfOdeEuler, n, &[0], seeds).unwrap()[0].clone();
        let (a, b, c) = (run(100), run(200), run(400));
        let order = (distance(&a, &b) / distance(&b, &c)).log2();
        assert!((0.8..=2.5).contains(&order), "order {order}");
    }

    #[test]
    fn jsonl_round_trip() {
        let f = oracle(GaussianMixture::standard_normal(2));
        let tr = sample(f.as_ref(), Solver::Ddpm, 5, 4, 1).unwrap();
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &tr).unwrap();
        assert_eq!(read_jsonl(&buf[..]).unwrap(), tr);
    }

    #[test]
    fn empty_csv_keeps_its_header() {
        let mut buf = Vec::new();
        write_endpoints_csv(&mut buf, 3, &[]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "id,x0,x1,x2\n");
    }
}
