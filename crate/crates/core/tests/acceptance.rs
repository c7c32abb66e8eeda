//! Acceptance run: one line per criterion, exit status 1 on any unexplained failure.
//!
//! A criterion whose literal statement cannot hold is printed as
//! `FAIL (explained)` together with the measured counts; the run only stays
//! green if every miss matches the stated explanation exactly.

use std::sync::Arc;
use std::time::Instant;

use gpc_core::config::ExperimentConfig;
use gpc_core::experiment::{
    self, composition_order_error, conversion_round_trip_error, improvement_study, unbiased_pair, Suite,
};
use gpc_core::oracle::{Bias, EstimatorSpec, GaussianMixture, MixtureSpec, OracleField};
use gpc_core::sampler::{sample_endpoints, OdeDynamics, StreamSeeds};
use gpc_core::schedule::{NoiseSchedule, Solver};
use gpc_core::search::{bench_evaluator, grid_search, is_unimodal, SearchResult};
use gpc_core::theory::{
    analytic_mse, constant_expected_bound, corollary_check, empirical_mse_curve, fit_quadratic, gronwall_certificate,
    weight_grid, EstimatorPair,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const VP: NoiseSchedule = NoiseSchedule::VpLinear {
    beta_min: 0.1,
    beta_max: 20.0,
};

enum Status {
    Pass,
    Fail,
    Explained(String),
}

struct Outcome {
    status: Status,
    detail: String,
}

fn judge(ok: bool, detail: String) -> Outcome {
    Outcome {
        status: if ok { Status::Pass } else { Status::Fail },
        detail,
    }
}

fn single_worker<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(f)
}

fn rel(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let (curve, q, fit) = single_worker(|| {
        let pair = unbiased_pair(2, 1.0, 4.0).unwrap();
        let q = analytic_mse(&pair, &VP, 0.5, &[0.0, 0.0]).unwrap();
        let grid = weight_grid(0.001).unwrap();
        let curve = empirical_mse_curve(&pair, &VP, 0.5, &[0.0, 0.0], &grid, 1_000_000, 101).unwrap();
        let (fit, _) = fit_quadratic(&curve.w, &curve.q).unwrap();
        (curve, q, fit)
    });
    let secs = start.elapsed().as_secs_f64();
    let argmin = curve.argmin();
    // Independent closed form: n11 = 2 * 1, n22 = 2 * 4, no bias, no correlation.
    let (a, b, c) = (2.0 + 8.0, 2.0 * (0.0 - 8.0), 8.0);
    let worst_fit = rel(fit[0], a).max(rel(fit[1], b)).max(rel(fit[2], c));
    let closed_form_ok = rel(q.a, a) < 1e-12 && rel(q.b, b) < 1e-12 && rel(q.c, c) < 1e-12;
    judge(
        (argmin - 0.8).abs() <= 0.02 && worst_fit <= 0.02 && closed_form_ok && secs < 30.0,
        format!(
            "argmin {argmin:.3} (target 0.8 +- 0.02), fit vs analytic max rel err {worst_fit:.2e} (<= 2e-2), \
             runtime {secs:.1} s single worker (< 30 s)"
        ),
    )
}

fn criterion_2() -> Outcome {
    let cases = improvement_study(100, 100_000, 202).unwrap();
    let n = cases.len();
    let non_worse = cases.iter().filter(|c| c.non_worsening()).count();
    let literal: Vec<_> = cases.iter().filter(|c| c.rho != 1.0 && c.biases_differ).collect();
    let strict = literal.iter().filter(|c| c.strict()).count();
    let misses: Vec<_> = literal.iter().filter(|c| !c.strict()).collect();
    let boundary = misses.iter().filter(|c| !c.interior).count();
    let unresolved = misses.iter().filter(|c| c.interior && !c.resolvable()).count();
    let unexplained = misses.len() - boundary - unresolved;
    let resolvable: Vec<_> = cases.iter().filter(|c| c.resolvable()).collect();
    let resolvable_strict = resolvable.iter().filter(|c| c.strict()).count();
    let detail = format!(
        "Q(w*) <= min endpoint + 3 SE in {non_worse}/{n}; strict gap > 5 SE in {strict}/{} configs with rho != 1 and \
         distinct biases; misses: {boundary} with unconstrained w* outside (0, 1) (constrained gap exactly 0), \
         {unresolved} interior with analytic gap <= 5 SE, {unexplained} unexplained; strict in {resolvable_strict}/{} \
         configs whose analytic gap exceeds 5 SE",
        literal.len(),
        resolvable.len()
    );
    let core_ok = non_worse == n && resolvable_strict == resolvable.len();
    let status = if !core_ok || unexplained > 0 {
        Status::Fail
    } else if misses.is_empty() {
        Status::Pass
    } else {
        Status::Explained(
            "strict improvement requires the unconstrained minimizer to lie in (0, 1); distinct biases and rho != 1 \
             do not imply that"
                .into(),
        )
    };
    Outcome { status, detail }
}

fn criterion_3() -> Outcome {
    let schedules = [
        VP,
        NoiseSchedule::VpScaledLinear {
            beta_min: 0.1,
            beta_max: 20.0,
        },
        NoiseSchedule::FlowLinear,
    ];
    let mut round = 0.0f64;
    let mut order = 0.0f64;
    for (i, s) in schedules.iter().enumerate() {
        round = round.max(conversion_round_trip_error(s, 10_000, 300 + i as u64).unwrap());
        order = order.max(composition_order_error(s, 10_000, 310 + i as u64).unwrap());
    }
    judge(
        round <= 1e-12 && order <= 1e-12,
        format!(
            "max round-trip error {round:.2e} over 10^4 probes x 12 directed pairs x 3 schedules, \
             composition-order error {order:.2e} (both <= 1e-12)"
        ),
    )
}

fn criterion_4() -> Outcome {
    let base = Arc::new(GaussianMixture::gaussian(vec![0.5, -0.5], vec![vec![0.5, 0.1], vec![0.1, 0.3]]).unwrap());
    let dynamics = OdeDynamics::probability_flow(VP);
    let b = 0.1 / 2f64.sqrt();
    let biased = EstimatorSpec::exact(base.clone()).with_bias(Bias::Constant { b: vec![b, -b] });
    let cert = gronwall_certificate(&biased, &dynamics, 1000, 1000, 404).unwrap();
    let control = gronwall_certificate(&EstimatorSpec::exact(base), &dynamics, 1000, 1000, 404).unwrap();
    let control_zero = control.expected_bound == 0.0
        && control.measured.iter().all(|m| *m == 0.0)
        && control.pathwise_bounds.iter().all(|p| *p == 0.0);
    let spot = constant_expected_bound(1.0, 1.0, 1.0, 1.0, 1000);
    let want = ((1f64.exp().powi(2) - 1.0) / 2.0).sqrt();
    judge(
        cert.violations == 0 && cert.expected_bound >= cert.mean_measured && control_zero && (spot - want).abs() <= 1e-3,
        format!(
            "pathwise violations {}/{}, expected bound {:.4e} >= mean error {:.4e}, kappa = 0 control all zero: {}, \
             constant-rate bound {spot:.6} vs {want:.6}",
            cert.violations,
            cert.measured.len(),
            cert.expected_bound,
            cert.mean_measured,
            control_zero
        ),
    )
}

fn criterion_5() -> Outcome {
    let base = Arc::new(GaussianMixture::standard_normal(2));
    let biased = |b: f64| EstimatorSpec::exact(base.clone()).with_bias(Bias::Constant { b: vec![b, 0.0] });
    let pair = EstimatorPair::new(biased(0.1), biased(-0.1), 0.0).unwrap();
    let grid = weight_grid(0.1).unwrap();
    let report = corollary_check(&pair, &grid, &OdeDynamics::probability_flow(VP), 1000, 64, 505).unwrap();
    let (mid, p0, p1) = (report.row(0.5).unwrap(), report.row(0.0).unwrap(), report.row(1.0).unwrap());
    let ordered = mid.certified_bound < p0.certified_bound.min(p1.certified_bound) && report.bound_violations.is_empty();
    judge(
        mid.mean_terminal_error <= 1e-9 && p0.mean_terminal_error > 0.05 && p1.mean_terminal_error > 0.05 && ordered,
        format!(
            "w = 0.5 error {:.1e} (<= 1e-9), parent errors {:.4} and {:.4} (> 0.05), certified bounds {:.3e} < {:.3e}",
            mid.mean_terminal_error,
            p0.mean_terminal_error,
            p1.mean_terminal_error,
            mid.certified_bound,
            p0.certified_bound.min(p1.certified_bound)
        ),
    )
}

struct Sweep {
    name: &'static str,
    result: SearchResult,
}

fn bench_sweeps() -> Vec<Sweep> {
    let configs = [
        ("symmetric", ExperimentConfig::two_shift(1.0, -1.0)),
        ("asymmetric", ExperimentConfig::two_shift(0.4, -1.0)),
        ("identical", ExperimentConfig::two_shift(0.6, 0.6)),
    ];
    configs
        .into_iter()
        .map(|(name, cfg)| {
            let r = cfg.resolve().unwrap();
            let eval = bench_evaluator(&r.task, r.estimator("first"), r.estimator("second"));
            Sweep {
                name,
                result: grid_search(eval, 0.1, 500, 606).unwrap(),
            }
        })
        .collect()
}

fn criterion_6(sweeps: &[Sweep]) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for s in sweeps {
        let pool = &s.result.pool;
        let ends = pool.get(0.0).unwrap().mean_reward.max(pool.get(1.0).unwrap().mean_reward);
        ok &= s.result.best_reward >= ends;
        parts.push(format!("{}: best {:.3} >= endpoints {:.3} at w* = {}", s.name, s.result.best_reward, ends, s.result.w_star));
    }
    ok &= sweeps[0].result.w_star == 0.5;
    judge(ok, format!("{}; symmetric w* must be 0.5", parts.join("; ")))
}

fn criterion_7() -> Outcome {
    let mix = GaussianMixture::new(&MixtureSpec {
        components: vec![
            gpc_core::oracle::ComponentSpec {
                weight: 0.5,
                mean: vec![1.0, 0.0],
                cov: vec![vec![0.3, 0.1], vec![0.1, 0.2]],
            },
            gpc_core::oracle::ComponentSpec {
                weight: 0.3,
                mean: vec![-1.0, 1.0],
                cov: vec![vec![0.2, 0.0], vec![0.0, 0.4]],
            },
            gpc_core::oracle::ComponentSpec {
                weight: 0.2,
                mean: vec![0.0, -1.5],
                cov: vec![vec![0.5, -0.2], vec![-0.2, 0.3]],
            },
        ],
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let t = rng.random_range(0.02..1.0);
        let x: Vec<f64> = (0..2).map(|_| rng.random_range(-3.0..3.0)).collect();
        let m = mix.marginal(&VP, t).unwrap();
        let s = m.score(&x);
        // Five-point central stencil on the log density.
        let h = 1e-3;
        let fd: Vec<f64> = (0..2)
            .map(|i| {
                let at = |k: f64| {
                    let mut y = x.clone();
                    y[i] += k * h;
                    m.log_density(&y)
                };
                (-at(2.0) + 8.0 * at(1.0) - 8.0 * at(-1.0) + at(-2.0)) / (12.0 * h)
            })
            .collect();
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let diff: Vec<f64> = s.iter().zip(&fd).map(|(a, b)| a - b).collect();
        worst = worst.max(norm(&diff) / norm(&s).max(1.0));
    }

    let mut moment_err: Vec<(f64, f64)> = Vec::new();
    for (mean, cov) in [
        (vec![0.0, 0.0], vec![vec![1.0, 0.0], vec![0.0, 1.0]]),
        (vec![1.0, -0.5], vec![vec![0.5, 0.2], vec![0.2, 0.3]]),
    ] {
        let g = Arc::new(GaussianMixture::gaussian(mean.clone(), cov.clone()).unwrap());
        let f = OracleField::new(g, VP);
        let n = 100_000;
        let ids: Vec<u64> = (0..n as u64).collect();
        let ends = sample_endpoints(&f, Solver::Ddim, 100, &ids, StreamSeeds::from_master(77)).unwrap();
        let mu: Vec<f64> = (0..2).map(|i| ends.iter().map(|e| e[i]).sum::<f64>() / n as f64).collect();
        let mut c = [[0.0; 2]; 2];
        for e in &ends {
            for i in 0..2 {
                for j in 0..2 {
                    c[i][j] += (e[i] - mu[i]) * (e[j] - mu[j]) / (n as f64 - 1.0);
                }
            }
        }
        let mean_err = mu.iter().zip(&mean).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..2 {
            for j in 0..2 {
                num += (c[i][j] - cov[i][j]).powi(2);
                den += cov[i][j].powi(2);
            }
        }
        moment_err.push((mean_err, (num / den).sqrt()));
    }
    let ok = worst <= 1e-6 && moment_err.iter().all(|(m, c)| *m <= 0.02 && *c <= 0.05);
    judge(
        ok,
        format!(
            "score vs finite-difference gradient max rel err {worst:.2e} (<= 1e-6, 10^3 probes); DDIM n = 10^5 \
             mean/cov errors: standard {:.4}/{:.2}%, correlated {:.4}/{:.2}% (<= 0.02 / 5%)",
            moment_err[0].0,
            100.0 * moment_err[0].1,
            moment_err[1].0,
            100.0 * moment_err[1].1
        ),
    )
}

fn criterion_8(sweeps: &[Sweep]) -> Outcome {
    let combined = |a: &gpc_core::search::PoolEntry, b: &gpc_core::search::PoolEntry| (a.se * a.se + b.se * b.se).sqrt();
    let sym = &sweeps[0].result;
    let peak = sym.pool.best().unwrap();
    let best_end = [sym.pool.get(0.0).unwrap(), sym.pool.get(1.0).unwrap()]
        .into_iter()
        .max_by(|a, b| a.mean_reward.total_cmp(&b.mean_reward))
        .unwrap();
    let interior = peak.w > 0.0 && peak.w < 1.0 && peak.mean_reward - best_end.mean_reward > 2.0 * combined(peak, best_end);
    let unimodal = is_unimodal(&sym.pool, 2.0);

    let asym = &sweeps[1].result;
    let apeak = asym.pool.best().unwrap();
    let other_side = asym
        .pool
        .entries
        .iter()
        .filter(|e| e.w < 0.5)
        .max_by(|a, b| a.mean_reward.total_cmp(&b.mean_reward))
        .unwrap();
    let side = apeak.w >= 0.5 && apeak.mean_reward - other_side.mean_reward > 2.0 * combined(apeak, other_side);
    let curve = |r: &SearchResult| {
        r.pool
            .entries
            .iter()
            .map(|e| format!("{:.2}", e.mean_reward))
            .collect::<Vec<_>>()
            .join(" ")
    };
    judge(
        interior && unimodal && side,
        format!(
            "symmetric SR(w) = [{}] unimodal within 2 SE: {unimodal}, interior peak at {} clear of endpoints by > 2 SE: \
             {interior}; asymmetric SR(w) = [{}] peak at {} (better parent is first), beats w < 0.5 by > 2 SE: {side}",
            curve(sym),
            peak.w,
            curve(asym),
            apeak.w
        ),
    )
}

fn criterion_9() -> Outcome {
    let mut cfg = ExperimentConfig::default();
    cfg.sampler.samples = 200;
    cfg.sweep.episodes = 100;
    cfg.task.episodes = 200;
    cfg.verify.prop1_draws = 100_000;
    cfg.verify.prop1_grid_step = 0.01;
    cfg.verify.gronwall_steps = 200;
    cfg.verify.gronwall_pairs = 50;
    cfg.verify.corollary_steps = 200;
    cfg.verify.corollary_pairs = 8;
    cfg.verify.conversion_probes = 1000;
    let seed = 909;
    let all = |workers: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .unwrap()
            .install(|| {
                vec![
                    experiment::run_verify(&cfg, Suite::All, seed).unwrap().0,
                    experiment::run_sample(&cfg, None, seed).unwrap(),
                    experiment::run_sweep(&cfg, None, None, seed).unwrap(),
                    experiment::run_bench_command(&cfg, None, seed).unwrap(),
                ]
            })
    };
    let (a, b, c) = (all(1), all(1), all(3));
    let dirs: Vec<_> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    let manifests: Vec<_> = dirs
        .iter()
        .map(|d| {
            a.iter()
                .map(|run| experiment::write_run(d.path(), &cfg, seed, run).unwrap())
                .collect::<Vec<_>>()
        })
        .collect();
    let bytes: usize = a.iter().flat_map(|r| &r.artifacts).map(|x| x.bytes.len()).sum();
    judge(
        a == b && a == c && manifests[0] == manifests[1],
        format!(
            "verify/sample/sweep/bench rerun with the same config and seed: {} artifacts ({bytes} bytes) identical \
             across reruns and across 1 vs 3 workers; manifests identical",
            a.iter().map(|r| r.artifacts.len()).sum::<usize>()
        ),
    )
}

fn main() {
    let sweeps = bench_sweeps();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("single-step improvement certification", Box::new(criterion_1)),
        ("improvement over random configurations", Box::new(criterion_2)),
        ("parameterization round trips", Box::new(criterion_3)),
        ("Gronwall bounds", Box::new(criterion_4)),
        ("corollary demo", Box::new(criterion_5)),
        ("grid-search invariant", Box::new(|| criterion_6(&sweeps))),
        ("oracle consistency", Box::new(criterion_7)),
        ("findings analog", Box::new(|| criterion_8(&sweeps))),
        ("determinism", Box::new(criterion_9)),
    ];
    let mut unexplained = 0;
    for (i, (title, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let o = run();
        let tag = match &o.status {
            Status::Pass => "PASS".to_string(),
            Status::Fail => {
                unexplained += 1;
                "FAIL".to_string()
            }
            Status::Explained(why) => format!("FAIL (explained: {why})"),
        };
        println!("criterion {} {tag} {title}: {} [{:.1} s]", i + 1, o.detail, start.elapsed().as_secs_f64());
    }
    if unexplained > 0 {
        eprintln!("{unexplained} criteria failed");
        std::process::exit(1);
    }
}
