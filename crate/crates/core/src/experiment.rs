//! Reproducible experiments: verification suites, sampling, weight sweeps and
//! bench runs, each producing named artifacts plus a manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bench::run_bench;
use crate::compose::ComposedField;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::field::{score, FieldRef, NoiseCtx, ScoreField};
use crate::oracle::{scaled_identity, Bias, EstimatorSpec, GaussianMixture, NoiseSpec, OracleField};
use crate::param::{as_kind, convert_value, PredictionKind};
use crate::rng;
use crate::sampler::{fmt_f64, sample, write_endpoints_csv, write_jsonl, OdeDynamics, StreamSeeds};
use crate::schedule::NoiseSchedule;
use crate::search::{bench_evaluator, grid_search};
use crate::svg::{self, Series};
use crate::theory::{
    analytic_mse, constant_expected_bound, corollary_check, empirical_mse_curve, fit_quadratic, gronwall_certificate,
    random_estimator_pair, weight_grid, EstimatorPair,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Prop1,
    Gronwall,
    Corollary,
    Conversions,
    All,
}

impl Suite {
    pub const NAMES: [&'static str; 5] = ["prop1", "gronwall", "corollary", "conversions", "all"];

    fn expand(self) -> Vec<Suite> {
        match self {
            Suite::All => vec![Suite::Conversions, Suite::Prop1, Suite::Gronwall, Suite::Corollary],
            s => vec![s],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Suite::Prop1 => "prop1",
            Suite::Gronwall => "gronwall",
            Suite::Corollary => "corollary",
            Suite::Conversions => "conversions",
            Suite::All => "all",
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "prop1" => Suite::Prop1,
            "gronwall" => Suite::Gronwall,
            "corollary" => Suite::Corollary,
            "conversions" => Suite::Conversions,
            "all" => Suite::All,
            other => return Err(Error::Config(format!("unknown suite '{other}', expected one of {:?}", Suite::NAMES))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Relation {
    #[serde(rename = "<=")]
    AtMost,
    #[serde(rename = "<")]
    Below,
    #[serde(rename = ">=")]
    AtLeast,
    #[serde(rename = ">")]
    Above,
}

impl Relation {
    fn holds(self, value: f64, limit: f64) -> bool {
        match self {
            Relation::AtMost => value <= limit,
            Relation::Below => value < limit,
            Relation::AtLeast => value >= limit,
            Relation::Above => value > limit,
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            Relation::AtMost => "<=",
            Relation::Below => "<",
            Relation::AtLeast => ">=",
            Relation::Above => ">",
        }
    }
}

/// One verified quantity against its limit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub suite: Suite,
    pub name: String,
    pub value: f64,
    pub relation: Relation,
    pub limit: f64,
    pub passed: bool,
}

impl Check {
    pub fn new(suite: Suite, name: impl Into<String>, value: f64, relation: Relation, limit: f64) -> Self {
        Check {
            suite,
            name: name.into(),
            value,
            relation,
            limit,
            passed: relation.holds(value, limit),
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {}.{}: {} {} {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.suite.name(),
            self.name,
            fmt_f64(self.value),
            self.relation.symbol(),
            fmt_f64(self.limit)
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub suite: Suite,
    pub seed: u64,
    pub checks: Vec<Check>,
    pub passed: bool,
    /// Per-suite measurements that are reported but not thresholded.
    pub details: BTreeMap<String, serde_json::Value>,
    #[serde(skip)]
    pub plots: Vec<(String, String)>,
}

struct SuiteOutput {
    checks: Vec<Check>,
    details: serde_json::Value,
    plots: Vec<(String, String)>,
}

/// Run the checks of `suite` (or of every suite) with fixtures from `cfg.verify`.
pub fn verify(cfg: &ExperimentConfig, suite: Suite, seed: u64) -> Result<VerifyReport> {
    let mut checks = Vec::new();
    let mut details = BTreeMap::new();
    let mut plots = Vec::new();
    for s in suite.expand() {
        let suite_seed = rng::derive_seed(seed, &[rng::tag::SUITE, s as u64]);
        let out = match s {
            Suite::Prop1 => verify_prop1(cfg, suite_seed)?,
            Suite::Gronwall => verify_gronwall(cfg, suite_seed)?,
            Suite::Corollary => verify_corollary(cfg, suite_seed)?,
            Suite::Conversions => verify_conversions(cfg, suite_seed)?,
            Suite::All => unreachable!("expanded above"),
        };
        checks.extend(out.checks);
        details.insert(s.name().to_string(), out.details);
        plots.extend(out.plots);
    }
    let passed = checks.iter().all(|c| c.passed);
    Ok(VerifyReport {
        suite,
        seed,
        checks,
        passed,
        details,
        plots,
    })
}

fn require_vp(cfg: &ExperimentConfig, suite: &str) -> Result<NoiseSchedule> {
    if !cfg.schedule.is_variance_preserving() {
        return Err(Error::Config(format!(
            "schedule: the {suite} suite integrates the reverse ODE from t = 1 and needs a variance-preserving schedule"
        )));
    }
    Ok(cfg.schedule)
}

fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(f64::MIN_POSITIVE)
}

/// Two unbiased, independent estimators with isotropic noise variances `v1`, `v2`.
pub fn unbiased_pair(dim: usize, v1: f64, v2: f64) -> Result<EstimatorPair> {
    let base = Arc::new(GaussianMixture::standard_normal(dim));
    let noisy = |v: f64| {
        EstimatorSpec::exact(base.clone()).with_noise(
            NoiseSpec::Gaussian {
                cov: scaled_identity(dim, v),
            },
            Default::default(),
        )
    };
    EstimatorPair::new(noisy(v1), noisy(v2), 0.0)
}

fn verify_prop1(cfg: &ExperimentConfig, seed: u64) -> Result<SuiteOutput> {
    let v = &cfg.verify;
    let pair = unbiased_pair(v.prop1_dim, v.prop1_variances[0], v.prop1_variances[1])?;
    let x = vec![0.0; v.prop1_dim];
    let analytic = analytic_mse(&pair, &cfg.schedule, v.prop1_time, &x)?;
    let grid = weight_grid(v.prop1_grid_step)?;
    let curve = empirical_mse_curve(&pair, &cfg.schedule, v.prop1_time, &x, &grid, v.prop1_draws, seed)?;
    let argmin = curve.argmin();
    let (fit, r2) = fit_quadratic(&curve.w, &curve.q)?;
    let s = Suite::Prop1;
    let checks = vec![
        Check::new(s, "argmin_offset", (argmin - analytic.w_star).abs(), Relation::AtMost, v.prop1_tolerance),
        Check::new(s, "fit_rel_err_a", rel_err(fit[0], analytic.a), Relation::AtMost, 0.02),
        Check::new(s, "fit_rel_err_b", rel_err(fit[1], analytic.b), Relation::AtMost, 0.02),
        Check::new(s, "fit_rel_err_c", rel_err(fit[2], analytic.c), Relation::AtMost, 0.02),
    ];
    let analytic_pts = curve.w.iter().map(|&w| (w, analytic.q(w), 0.0)).collect();
    let stride = (curve.w.len() / 50).max(1);
    let empirical_pts = (0..curve.w.len())
        .step_by(stride)
        .map(|i| (curve.w[i], curve.q[i], curve.se[i]))
        .collect();
    let plot = svg::chart(
        "single-step MSE of the convex combination",
        "w",
        "Q(w)",
        &[
            Series {
                name: "analytic".into(),
                points: analytic_pts,
                line: true,
            },
            Series {
                name: "Monte Carlo".into(),
                points: empirical_pts,
                line: false,
            },
        ],
    );
    Ok(SuiteOutput {
        checks,
        details: serde_json::json!({
            "w_star_analytic": analytic.w_star,
            "w_star_empirical": argmin,
            "analytic_abc": [analytic.a, analytic.b, analytic.c],
            "fitted_abc": fit,
            "fit_r2": r2,
            "draws": v.prop1_draws,
        }),
        plots: vec![("prop1_q.svg".into(), plot)],
    })
}

fn verify_gronwall(cfg: &ExperimentConfig, seed: u64) -> Result<SuiteOutput> {
    let v = &cfg.verify;
    let sched = require_vp(cfg, "gronwall")?;
    let base = Arc::new(GaussianMixture::standard_normal(2));
    let dynamics = OdeDynamics::probability_flow(sched);
    let biased = EstimatorSpec::exact(base.clone()).with_bias(Bias::Constant {
        b: vec![v.gronwall_bias, 0.0],
    });
    let cert = gronwall_certificate(&biased, &dynamics, v.gronwall_steps, v.gronwall_pairs, seed)?;
    let control = gronwall_certificate(&EstimatorSpec::exact(base), &dynamics, v.gronwall_steps, v.gronwall_pairs, seed)?;
    let max_abs = |xs: &[f64]| xs.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let closed = constant_expected_bound(1.0, 1.0, 1.0, 1.0, v.gronwall_steps);
    let want = ((std::f64::consts::E.powi(2) - 1.0) / 2.0).sqrt();
    let s = Suite::Gronwall;
    let checks = vec![
        Check::new(s, "pathwise_violations", cert.violations as f64, Relation::AtMost, 0.0),
        Check::new(s, "expected_bound_minus_mean_error", cert.expected_bound - cert.mean_measured, Relation::AtLeast, 0.0),
        Check::new(s, "control_expected_bound", control.expected_bound, Relation::AtMost, 0.0),
        Check::new(s, "control_max_pathwise_bound", max_abs(&control.pathwise_bounds), Relation::AtMost, 0.0),
        Check::new(s, "control_max_error", max_abs(&control.measured), Relation::AtMost, 0.0),
        Check::new(s, "constant_rate_closed_form_err", (closed - want).abs(), Relation::AtMost, 1e-3),
    ];
    let scatter: Vec<(f64, f64, f64)> = cert.measured.iter().zip(&cert.pathwise_bounds).map(|(&m, &b)| (m, b, 0.0)).collect();
    let hi = scatter.iter().fold(0.0f64, |a, p| a.max(p.0).max(p.1));
    let plot = svg::chart(
        "pathwise bound against measured terminal error",
        "measured |x - x*|",
        "bound",
        &[
            Series {
                name: "pairs".into(),
                points: scatter,
                line: false,
            },
            Series {
                name: "bound = error".into(),
                points: vec![(0.0, 0.0, 0.0), (hi, hi, 0.0)],
                line: true,
            },
        ],
    );
    Ok(SuiteOutput {
        checks,
        details: serde_json::json!({
            "expected_bound": cert.expected_bound,
            "mean_measured": cert.mean_measured,
            "mean_pathwise": cert.mean_pathwise,
            "max_measured": max_abs(&cert.measured),
            "closed_form_quadrature": closed,
            "closed_form_exact": want,
            "steps": v.gronwall_steps,
            "pairs": v.gronwall_pairs,
        }),
        plots: vec![("gronwall_scatter.svg".into(), plot)],
    })
}

fn verify_corollary(cfg: &ExperimentConfig, seed: u64) -> Result<SuiteOutput> {
    let v = &cfg.verify;
    let sched = require_vp(cfg, "corollary")?;
    let base = Arc::new(GaussianMixture::standard_normal(2));
    let biased = |b: f64| EstimatorSpec::exact(base.clone()).with_bias(Bias::Constant { b: vec![b, 0.0] });
    let pair = EstimatorPair::new(biased(v.corollary_delta), biased(-v.corollary_delta), 0.0)?;
    let grid = weight_grid(0.1)?;
    let dynamics = OdeDynamics::probability_flow(sched);
    let report = corollary_check(&pair, &grid, &dynamics, v.corollary_steps, v.corollary_pairs, seed)?;
    let row = |w: f64| report.row(w).ok_or_else(|| Error::Evaluation(format!("no corollary row at w = {w}")));
    let (mid, p0, p1) = (row(0.5)?, row(0.0)?, row(1.0)?);
    let s = Suite::Corollary;
    let checks = vec![
        Check::new(s, "balanced_error", mid.mean_terminal_error, Relation::AtMost, 1e-9),
        Check::new(s, "min_parent_error", p0.mean_terminal_error.min(p1.mean_terminal_error), Relation::Above, 0.05),
        Check::new(
            s,
            "balanced_bound_minus_parent_bound",
            mid.certified_bound - p0.certified_bound.min(p1.certified_bound),
            Relation::Below,
            0.0,
        ),
        Check::new(s, "bound_ordering_violations", report.bound_violations.len() as f64, Relation::AtMost, 0.0),
    ];
    let plot = svg::chart(
        "certified bound and measured error across weights",
        "w",
        "terminal error",
        &[
            Series {
                name: "certified bound".into(),
                points: report.rows.iter().map(|r| (r.w, r.certified_bound, 0.0)).collect(),
                line: true,
            },
            Series {
                name: "measured mean".into(),
                points: report.rows.iter().map(|r| (r.w, r.mean_terminal_error, 0.0)).collect(),
                line: true,
            },
        ],
    );
    Ok(SuiteOutput {
        checks,
        details: serde_json::to_value(&report)?,
        plots: vec![("corollary.svg".into(), plot)],
    })
}

/// Largest round-trip error `a -> b -> a` over random probes and all ordered
/// pairs of distinct parameterizations.
pub fn conversion_round_trip_error(schedule: &NoiseSchedule, probes: usize, seed: u64) -> Result<f64> {
    let mut s = rng::stream(seed, &[rng::tag::SUITE, 3]);
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let t = s.random_range(0.05..0.95);
        let x: Vec<f64> = (0..3).map(|_| s.random_range(-3.0..3.0)).collect();
        let value: Vec<f64> = (0..3).map(|_| s.random_range(-3.0..3.0)).collect();
        for from in PredictionKind::ALL {
            for to in PredictionKind::ALL.into_iter().filter(|k| *k != from) {
                let there = convert_value(from, to, &value, t, &x, schedule)?;
                let back = convert_value(to, from, &there, t, &x, schedule)?;
                for (a, b) in back.iter().zip(&value) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
    }
    Ok(worst)
}

/// Largest gap between a convex composition evaluated in score space and the
/// same composition evaluated in epsilon space.
pub fn composition_order_error(schedule: &NoiseSchedule, probes: usize, seed: u64) -> Result<f64> {
    let g1 = Arc::new(GaussianMixture::gaussian(vec![1.0, -0.5], vec![vec![0.3, 0.1], vec![0.1, 0.5]])?);
    let g2 = Arc::new(GaussianMixture::isotropic(vec![-0.5, 0.8], 0.2)?);
    let o1: FieldRef = Arc::new(OracleField::new(g1, *schedule));
    let o2: FieldRef = Arc::new(OracleField::new(g2, *schedule));
    let e1 = as_kind(o1.clone(), PredictionKind::Epsilon);
    let e2 = as_kind(o2.clone(), PredictionKind::Epsilon);
    let mut s = rng::stream(seed, &[rng::tag::SUITE, 4]);
    let mut ctx = NoiseCtx::detached();
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let t = s.random_range(0.05..0.95);
        let w = s.random_range(0.0..1.0);
        let x: Vec<f64> = (0..2).map(|_| s.random_range(-3.0..3.0)).collect();
        let in_score = ComposedField::convex(vec![o1.clone(), o2.clone()], vec![w, 1.0 - w])?;
        let in_eps = ComposedField::convex(vec![e1.clone(), e2.clone()], vec![w, 1.0 - w])?;
        debug_assert_eq!(in_eps.kind(), PredictionKind::Epsilon);
        let a = score(&in_score, t, &x, &mut ctx)?;
        let b = score(&in_eps, t, &x, &mut ctx)?;
        for (u, v) in a.iter().zip(&b) {
            worst = worst.max((u - v).abs());
        }
    }
    Ok(worst)
}

fn verify_conversions(cfg: &ExperimentConfig, seed: u64) -> Result<SuiteOutput> {
    let v = &cfg.verify;
    let mut schedules = vec![cfg.schedule];
    if cfg.schedule != NoiseSchedule::FlowLinear {
        schedules.push(NoiseSchedule::FlowLinear);
    }
    let s = Suite::Conversions;
    let mut checks = Vec::new();
    let mut details = serde_json::Map::new();
    for sched in schedules {
        let round = conversion_round_trip_error(&sched, v.conversion_probes, seed)?;
        let order = composition_order_error(&sched, v.conversion_probes, seed)?;
        checks.push(Check::new(s, format!("{}.round_trip_max_err", sched.name()), round, Relation::AtMost, v.conversion_tolerance));
        checks.push(Check::new(s, format!("{}.composition_order_max_err", sched.name()), order, Relation::AtMost, v.conversion_tolerance));
        details.insert(sched.name().into(), serde_json::json!({ "round_trip": round, "composition_order": order }));
    }
    Ok(SuiteOutput {
        checks,
        details: serde_json::Value::Object(details),
        plots: Vec::new(),
    })
}

/// Outcome of the convex-improvement study on one random estimator pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImprovementCase {
    pub rho: f64,
    pub biases_differ: bool,
    /// Unconstrained minimizer of the analytic quadratic.
    pub w_star: f64,
    pub interior: bool,
    pub analytic_gap: f64,
    pub q_endpoint_min: f64,
    pub q_at_w_star: f64,
    /// Standard error of `Q(w*) - min(Q(0), Q(1))` under common random numbers.
    pub se: f64,
}

impl ImprovementCase {
    pub fn measured_gap(&self) -> f64 {
        self.q_endpoint_min - self.q_at_w_star
    }

    pub fn non_worsening(&self) -> bool {
        self.q_at_w_star <= self.q_endpoint_min + 3.0 * self.se
    }

    pub fn strict(&self) -> bool {
        self.measured_gap() > 5.0 * self.se
    }

    /// The analytic gap is large enough for a strict gap to be resolvable.
    pub fn resolvable(&self) -> bool {
        self.analytic_gap > 5.0 * self.se
    }
}

fn bias_vector(spec: &EstimatorSpec) -> Vec<f64> {
    match &spec.bias {
        Bias::Constant { b } => b.clone(),
        _ => vec![0.0; spec.dim()],
    }
}

/// Compare `Q` at the constrained minimizer with the better endpoint over
/// `n_configs` random estimator pairs.
pub fn improvement_study(n_configs: usize, draws: usize, seed: u64) -> Result<Vec<ImprovementCase>> {
    let base = Arc::new(GaussianMixture::standard_normal(3));
    let x = vec![0.0; 3];
    let sched = NoiseSchedule::vp_linear();
    let mut s = rng::stream(seed, &[rng::tag::SUITE, 2]);
    let mut out = Vec::with_capacity(n_configs);
    for k in 0..n_configs {
        let pair = random_estimator_pair(&mut s, base.clone());
        let q = analytic_mse(&pair, &sched, 0.5, &x)?;
        let wc = q.constrained_w_star();
        let curve = empirical_mse_curve(&pair, &sched, 0.5, &x, &[0.0, wc, 1.0], draws, rng::derive_seed(seed, &[k as u64]))?;
        let (q0, q1, qw) = (curve.q[0], curve.q[2], curve.q[1]);
        let best_end = if q0 <= q1 { 0.0 } else { 1.0 };
        out.push(ImprovementCase {
            rho: pair.rho,
            biases_differ: bias_vector(&pair.first) != bias_vector(&pair.second),
            w_star: q.w_star,
            interior: q.is_interior(),
            analytic_gap: q.constrained_gap(),
            q_endpoint_min: q0.min(q1),
            q_at_w_star: qw,
            se: curve.diff_se(wc, best_end),
        });
    }
    Ok(out)
}

/// Bytes of one output file.
#[derive(Clone, Debug, PartialEq)]
pub struct Artifact {
    pub name: String,
    pub bytes: Vec<u8>,
}

impl Artifact {
    fn new(name: &str, bytes: impl Into<Vec<u8>>) -> Self {
        Artifact {
            name: name.into(),
            bytes: bytes.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutput {
    pub command: String,
    /// Command-specific parameters recorded in the manifest.
    pub params: serde_json::Value,
    pub artifacts: Vec<Artifact>,
    /// False when a verification failed.
    pub passed: bool,
}

pub fn run_verify(cfg: &ExperimentConfig, suite: Suite, seed: u64) -> Result<(RunOutput, VerifyReport)> {
    let report = verify(cfg, suite, seed)?;
    let mut artifacts = vec![Artifact::new("verify.json", pretty_json(&report)?)];
    for (name, svg) in &report.plots {
        artifacts.push(Artifact::new(name, svg.as_bytes()));
    }
    let out = RunOutput {
        command: "verify".into(),
        params: serde_json::json!({ "suite": suite }),
        artifacts,
        passed: report.passed,
    };
    Ok((out, report))
}

/// Sample the configured composition; `n` overrides `sampler.samples`.
pub fn run_sample(cfg: &ExperimentConfig, n: Option<usize>, seed: u64) -> Result<RunOutput> {
    let resolved = cfg.resolve()?;
    let field = cfg.composed(&resolved)?;
    let n = n.unwrap_or(cfg.sampler.samples);
    let trajectories = sample(&field, cfg.sampler.solver, cfg.sampler.steps, n, seed)?;
    let rows: Vec<(u64, Vec<f64>)> = trajectories.iter().map(|t| (t.id, t.terminal().to_vec())).collect();
    let mut csv = Vec::new();
    write_endpoints_csv(&mut csv, field.dim(), &rows)?;
    let mut jsonl = Vec::new();
    write_jsonl(&mut jsonl, &trajectories)?;
    Ok(RunOutput {
        command: "sample".into(),
        params: serde_json::json!({ "n": n, "solver": cfg.sampler.solver, "steps": cfg.sampler.steps }),
        artifacts: vec![Artifact::new("samples.csv", csv), Artifact::new("trajectories.jsonl", jsonl)],
        passed: true,
    })
}

/// Grid search over the weight of `sweep.first` against `sweep.second`.
pub fn run_sweep(cfg: &ExperimentConfig, grid_step: Option<f64>, episodes: Option<usize>, seed: u64) -> Result<RunOutput> {
    let resolved = cfg.resolve()?;
    let step = grid_step.unwrap_or(cfg.sweep.grid_step);
    let episodes = episodes.unwrap_or(cfg.sweep.episodes);
    let first = resolved.estimator(&cfg.sweep.first);
    let second = resolved.estimator(&cfg.sweep.second);
    let result = grid_search(bench_evaluator(&resolved.task, first, second), step, episodes, seed)?;
    let title = format!("success rate of w {} + (1 - w) {}", cfg.sweep.first, cfg.sweep.second);
    Ok(RunOutput {
        command: "sweep".into(),
        params: serde_json::json!({ "grid_step": step, "episodes": episodes }),
        artifacts: vec![
            Artifact::new("pool.csv", result.pool.to_csv()),
            Artifact::new("pool.json", pretty_json(&result)?),
            Artifact::new("sweep.svg", result.pool.to_svg(&title)),
        ],
        passed: true,
    })
}

/// Score the configured composition on the bench task.
pub fn run_bench_command(cfg: &ExperimentConfig, episodes: Option<usize>, seed: u64) -> Result<RunOutput> {
    let resolved = cfg.resolve()?;
    let field = cfg.composed(&resolved)?;
    let episodes = episodes.unwrap_or(cfg.task.episodes);
    let r = run_bench(&resolved.task, &field, episodes, StreamSeeds::from_master(seed))?;
    let mut csv = String::from("operator,episodes,successes,success_rate,se,energy_distance\n");
    let _ = writeln!(
        csv,
        "{},{},{},{},{},{}",
        cfg.composition.operator.name(),
        r.episodes,
        r.successes,
        fmt_f64(r.success_rate),
        fmt_f64(r.se),
        r.energy_distance.map(fmt_f64).unwrap_or_default()
    );
    Ok(RunOutput {
        command: "bench".into(),
        params: serde_json::json!({ "episodes": episodes }),
        artifacts: vec![Artifact::new("bench.csv", csv), Artifact::new("bench.json", pretty_json(&r)?)],
        passed: true,
    })
}

fn pretty_json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(v)?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Everything needed to repeat a run: the effective configuration (also
/// written next to the outputs), the seed, the parameters and output hashes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub params: serde_json::Value,
    pub schema_version: u32,
    pub config_file: String,
    pub config_sha256: String,
    pub package: String,
    pub version: String,
    pub outputs: BTreeMap<String, String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";

/// Write the artifacts, the effective configuration and the manifest into `dir`.
pub fn write_run(dir: &Path, cfg: &ExperimentConfig, seed: u64, run: &RunOutput) -> Result<Manifest> {
    std::fs::create_dir_all(dir)?;
    let config_text = cfg.to_toml()?;
    let mut outputs = BTreeMap::new();
    for a in &run.artifacts {
        std::fs::write(dir.join(&a.name), &a.bytes)?;
        outputs.insert(a.name.clone(), sha256_hex(&a.bytes));
    }
    std::fs::write(dir.join(CONFIG_FILE), &config_text)?;
    let manifest = Manifest {
        command: run.command.clone(),
        seed,
        params: run.params.clone(),
        schema_version: cfg.schema_version,
        config_file: CONFIG_FILE.into(),
        config_sha256: sha256_hex(config_text.as_bytes()),
        package: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        outputs,
    };
    std::fs::write(dir.join(MANIFEST_FILE), pretty_json(&manifest)?)?;
    Ok(manifest)
}
