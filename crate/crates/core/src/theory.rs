//! Numerical certificates for convex score combination.
//!
//! Single step: with `eps_i = s* + b_i + eta_i`, the error of the combination
//! `w eps_1 + (1 - w) eps_2` has mean square `Q(w) = A w^2 + B w + C`, a convex
//! quadratic whose minimizer never does worse than the better endpoint.
//!
//! Trajectory level: for dynamics `dx/dt = F(t, x, s)` that are Lipschitz in
//! `x` (constant `L_x`) and in `s` (constant `L_s`), with the estimator's score
//! Lipschitz in `x` (constant `Lambda`), the terminal gap between the oracle and
//! the estimator trajectories obeys the Gronwall bound
//!
//! ```text
//! |e(T)| <= int_0^T exp(int_r^T L~) L_s(r) |D(r)| dr
//!        <= (int_0^T exp(2 int_r^T L~) L_s^2 dr)^(1/2) (int_0^T kappa^2 dr)^(1/2)
//! ```
//!
//! with `L~ = L_x + L_s Lambda`, `D` the score error along the oracle path and
//! `kappa` a uniform bound on it. Integration runs in reverse time `r = 1 - t`
//! and every integral is a trapezoid rule on the sampler grid.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compose::ComposedField;
use crate::error::{check_dim, Error, Result};
use crate::field::{FieldRef, NoiseCtx, ScoreField};
use crate::oracle::{make_estimator, Bias, EstimatorSpec, Freshness, GaussianMixture, NoiseSpec, OracleField};
use crate::rng::{self, Stream};
use crate::sampler::{simulate_pairs, Integrator, OdeDynamics, PairDynamics};
use crate::schedule::{uniform_grid, NoiseSchedule};

/// Below this `A` is treated as zero: the two errors coincide almost surely.
pub const ALIGNMENT_TOL: f64 = 1e-12;

/// Two estimators of one oracle whose noises have correlation `rho`.
///
/// With lower factors `L_1`, `L_2` the noises are
/// `eta_1 = L_1 z_1` and `eta_2 = L_2 (rho z_1 + sqrt(1 - rho^2) z_2)`.
#[derive(Clone, Debug)]
pub struct EstimatorPair {
    pub first: EstimatorSpec,
    pub second: EstimatorSpec,
    pub rho: f64,
}

impl EstimatorPair {
    pub fn new(first: EstimatorSpec, second: EstimatorSpec, rho: f64) -> Result<Self> {
        check_dim(first.dim(), second.dim())?;
        if !Arc::ptr_eq(&first.base, &second.base) && first.base.spec() != second.base.spec() {
            return Err(Error::Spec("estimators must share one base mixture".into()));
        }
        if !(-1.0..=1.0).contains(&rho) {
            return Err(Error::Domain {
                what: "rho",
                value: rho,
                lo: -1.0,
                hi: 1.0,
            });
        }
        Ok(EstimatorPair { first, second, rho })
    }

    pub fn dim(&self) -> usize {
        self.first.dim()
    }

    fn biases(&self, schedule: &NoiseSchedule, t: f64, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let e1 = make_estimator(&self.first, *schedule, 0)?;
        let e2 = make_estimator(&self.second, *schedule, 0)?;
        Ok((e1.bias_at(t, x)?, e2.bias_at(t, x)?))
    }

    /// `(E|eta_1|^2, E<eta_1, eta_2>, E|eta_2|^2)` from the declared covariances.
    pub fn noise_moments(&self) -> Result<(f64, f64, f64)> {
        let l1 = self.first.noise_factor()?;
        let l2 = self.second.noise_factor()?;
        Ok((
            self.first.noise_cov()?.trace(),
            self.rho * (l1.transpose() * &l2).trace(),
            self.second.noise_cov()?.trace(),
        ))
    }
}

/// `Q(w) = a w^2 + b w + c` and its minimizer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MseQuadratic {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    /// Unconstrained minimizer `-b / 2a`; `0` when the errors are aligned.
    pub w_star: f64,
    pub q_star: f64,
    /// `Q(0) - Q(w*) = b^2 / 4a`.
    pub gap0: f64,
    /// `Q(1) - Q(w*) = (2a + b)^2 / 4a`.
    pub gap1: f64,
    /// The two errors coincide, so `Q` is constant.
    pub aligned: bool,
}

impl MseQuadratic {
    pub fn from_coefficients(a: f64, b: f64, c: f64) -> Self {
        if a <= ALIGNMENT_TOL {
            return MseQuadratic {
                a,
                b,
                c,
                w_star: 0.0,
                q_star: c,
                gap0: 0.0,
                gap1: 0.0,
                aligned: true,
            };
        }
        MseQuadratic {
            a,
            b,
            c,
            w_star: -b / (2.0 * a),
            q_star: c - b * b / (4.0 * a),
            gap0: b * b / (4.0 * a),
            gap1: (2.0 * a + b).powi(2) / (4.0 * a),
            aligned: false,
        }
    }

    pub fn q(&self, w: f64) -> f64 {
        (self.a * w + self.b) * w + self.c
    }

    /// Minimizer over `[0, 1]`.
    pub fn constrained_w_star(&self) -> f64 {
        self.w_star.clamp(0.0, 1.0)
    }

    /// `min(Q(0), Q(1)) - Q(w_c)` at the constrained minimizer; zero unless
    /// the unconstrained minimizer is interior.
    pub fn constrained_gap(&self) -> f64 {
        (self.q(0.0).min(self.q(1.0)) - self.q(self.constrained_w_star())).max(0.0)
    }

    pub fn is_interior(&self) -> bool {
        !self.aligned && self.w_star > 0.0 && self.w_star < 1.0
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u * v).sum()
}

/// Closed-form single-step quadratic at `(t, x)`.
pub fn analytic_mse(pair: &EstimatorPair, schedule: &NoiseSchedule, t: f64, x: &[f64]) -> Result<MseQuadratic> {
    let (b1, b2) = pair.biases(schedule, t, x)?;
    let (n11, n12, n22) = pair.noise_moments()?;
    let diff: Vec<f64> = b1.iter().zip(&b2).map(|(u, v)| u - v).collect();
    let a = dot(&diff, &diff) + n11 + n22 - 2.0 * n12;
    let b = 2.0 * (dot(&b2, &diff) + n12 - n22);
    let c = dot(&b2, &b2) + n22;
    Ok(MseQuadratic::from_coefficients(a, b, c))
}

/// Running sums of `(|e1|^2, <e1, e2>, |e2|^2)` and their products.
#[derive(Clone, Copy, Debug, Default)]
struct Moments {
    n: f64,
    mean: [f64; 3],
    prod: [[f64; 3]; 3],
}

impl Moments {
    fn push(&mut self, v: [f64; 3]) {
        self.n += 1.0;
        for i in 0..3 {
            self.mean[i] += v[i];
            for j in 0..3 {
                self.prod[i][j] += v[i] * v[j];
            }
        }
    }

    fn merge(mut self, o: &Moments) -> Moments {
        self.n += o.n;
        for i in 0..3 {
            self.mean[i] += o.mean[i];
            for j in 0..3 {
                self.prod[i][j] += o.prod[i][j];
            }
        }
        self
    }

    fn finish(&self) -> ([f64; 3], [[f64; 3]; 3]) {
        let n = self.n;
        let m = self.mean.map(|s| s / n);
        let mut cov = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                cov[i][j] = (self.prod[i][j] - n * m[i] * m[j]) / (n - 1.0);
            }
        }
        (m, cov)
    }
}

/// Monte-Carlo estimate of `Q` on a grid of weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MseCurve {
    pub w: Vec<f64>,
    pub q: Vec<f64>,
    /// Standard error of each `q`.
    pub se: Vec<f64>,
    pub n_mc: usize,
    /// Sample means of `(|e1|^2, <e1, e2>, |e2|^2)`.
    pub moments: [f64; 3],
    pub moment_cov: [[f64; 3]; 3],
}

impl MseCurve {
    /// Estimate and standard error at any `w`, from the stored moments.
    pub fn at(&self, w: f64) -> (f64, f64) {
        let g = [w * w, 2.0 * w * (1.0 - w), (1.0 - w) * (1.0 - w)];
        let q = dot(&g, &self.moments);
        let mut var = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                var += g[i] * g[j] * self.moment_cov[i][j];
            }
        }
        (q, (var.max(0.0) / self.n_mc as f64).sqrt())
    }

    /// Standard error of `Q(w1) - Q(w2)` with both read off the same draws.
    pub fn diff_se(&self, w1: f64, w2: f64) -> f64 {
        let g = |w: f64| [w * w, 2.0 * w * (1.0 - w), (1.0 - w) * (1.0 - w)];
        let (g1, g2) = (g(w1), g(w2));
        let d: Vec<f64> = (0..3).map(|i| g1[i] - g2[i]).collect();
        let mut var = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                var += d[i] * d[j] * self.moment_cov[i][j];
            }
        }
        (var.max(0.0) / self.n_mc as f64).sqrt()
    }

    /// Grid point with the smallest estimate (first one on ties).
    pub fn argmin(&self) -> f64 {
        let mut best = 0;
        for i in 1..self.q.len() {
            if self.q[i] < self.q[best] {
                best = i;
            }
        }
        self.w[best]
    }
}

/// Draws per independent Monte-Carlo block.
const MC_BLOCK: usize = 8192;

pub fn empirical_mse_curve(
    pair: &EstimatorPair,
    schedule: &NoiseSchedule,
    t: f64,
    x: &[f64],
    w_grid: &[f64],
    n_mc: usize,
    seed: u64,
) -> Result<MseCurve> {
    if n_mc < 2 {
        return Err(Error::Domain {
            what: "n_mc",
            value: n_mc as f64,
            lo: 2.0,
            hi: f64::INFINITY,
        });
    }
    if let Some(w) = w_grid.iter().find(|w| !(0.0..=1.0).contains(*w)) {
        return Err(Error::Domain {
            what: "w",
            value: *w,
            lo: 0.0,
            hi: 1.0,
        });
    }
    let d = pair.dim();
    let (b1, b2) = pair.biases(schedule, t, x)?;
    let l1 = pair.first.noise_factor()?;
    let l2 = pair.second.noise_factor()?;
    let rho = pair.rho;
    let rho_c = (1.0 - rho * rho).max(0.0).sqrt();
    let n_blocks = n_mc.div_ceil(MC_BLOCK);
    let moments = (0..n_blocks)
        .into_par_iter()
        .map(|blk| {
            let mut s: Stream = rng::stream(seed, &[rng::tag::MC, blk as u64]);
            let count = MC_BLOCK.min(n_mc - blk * MC_BLOCK);
            let mut m = Moments::default();
            for _ in 0..count {
                let z1 = DVector::from_vec(rng::standard_normal_vec(&mut s, d));
                let z2 = DVector::from_vec(rng::standard_normal_vec(&mut s, d));
                let eta1 = &l1 * &z1;
                let eta2 = &l2 * (&z1 * rho + z2 * rho_c);
                let e1: Vec<f64> = b1.iter().zip(eta1.iter()).map(|(b, e)| b + e).collect();
                let e2: Vec<f64> = b2.iter().zip(eta2.iter()).map(|(b, e)| b + e).collect();
                m.push([dot(&e1, &e1), dot(&e1, &e2), dot(&e2, &e2)]);
            }
            m
        })
        .collect::<Vec<_>>()
        .iter()
        .fold(Moments::default(), |acc, m| acc.merge(m));
    let (mean, cov) = moments.finish();
    let mut curve = MseCurve {
        w: w_grid.to_vec(),
        q: Vec::with_capacity(w_grid.len()),
        se: Vec::with_capacity(w_grid.len()),
        n_mc,
        moments: mean,
        moment_cov: cov,
    };
    for &w in w_grid {
        let (q, se) = curve.at(w);
        curve.q.push(q);
        curve.se.push(se);
    }
    Ok(curve)
}

/// Least-squares quadratic `(a, b, c)` through `(w, q)` and its `R^2`.
pub fn fit_quadratic(w: &[f64], q: &[f64]) -> Result<([f64; 3], f64)> {
    if w.len() < 3 || w.len() != q.len() {
        return Err(Error::Evaluation("quadratic fit needs at least three points".into()));
    }
    let x = DMatrix::from_fn(w.len(), 3, |i, j| w[i].powi(2 - j as i32));
    let y = DVector::from_column_slice(q);
    let coef = x
        .clone()
        .svd(true, true)
        .solve(&y, 1e-14)
        .map_err(|e| Error::Evaluation(e.to_string()))?;
    let fitted = &x * &coef;
    let mean = y.mean();
    let ss_res: f64 = (&y - &fitted).norm_squared();
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Ok(([coef[0], coef[1], coef[2]], r2))
}

/// Uniform grid on `[0, 1]` with the given step (both endpoints included).
pub fn weight_grid(step: f64) -> Result<Vec<f64>> {
    let n = (1.0 / step).round();
    if !(step > 0.0) || n < 1.0 || ((n * step) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("grid step {step} does not divide 1 evenly")));
    }
    let n = n as usize;
    Ok((0..=n).map(|k| k as f64 / n as f64).collect())
}

/// A random estimator pair over `base`: biases of random size and direction,
/// random noise covariances (possibly absent) and a random correlation.
pub fn random_estimator_pair<R: Rng + ?Sized>(rng: &mut R, base: Arc<GaussianMixture>) -> EstimatorPair {
    let d = base.dim();
    let spec = |rng: &mut R| {
        let bias = if rng.random_bool(0.8) {
            Bias::Constant {
                b: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
            }
        } else {
            Bias::None
        };
        let noise = if rng.random_bool(0.8) {
            let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
            let cov = &a * a.transpose() + DMatrix::identity(d, d) * rng.random_range(0.05..1.0);
            NoiseSpec::Gaussian {
                cov: (0..d).map(|i| (0..d).map(|j| cov[(i, j)]).collect()).collect(),
            }
        } else {
            NoiseSpec::None
        };
        EstimatorSpec {
            base: base.clone(),
            bias,
            noise,
            freshness: Freshness::PerCall,
        }
    };
    let first = spec(rng);
    let second = spec(rng);
    let rho = rng.random_range(-0.95..0.95);
    EstimatorPair { first, second, rho }
}

/// Cumulative trapezoid of `f` on `r`, starting at zero.
pub fn cumulative_trapezoid(r: &[f64], f: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(r.len());
    out.push(0.0);
    for k in 1..r.len() {
        let prev = out[k - 1];
        out.push(prev + 0.5 * (r[k] - r[k - 1]) * (f[k] + f[k - 1]));
    }
    out
}

pub fn trapezoid(r: &[f64], f: &[f64]) -> f64 {
    (1..r.len()).map(|k| 0.5 * (r[k] - r[k - 1]) * (f[k] + f[k - 1])).sum()
}

/// Gronwall weights `exp(A(T) - A(r)) L_s(r)` on a reverse-time grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GronwallKernel {
    pub r: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GronwallKernel {
    pub fn new(r: &[f64], l_tilde: &[f64], l_s: &[f64]) -> Self {
        let a = cumulative_trapezoid(r, l_tilde);
        let total = *a.last().expect("nonempty grid");
        GronwallKernel {
            r: r.to_vec(),
            weights: a.iter().zip(l_s).map(|(ak, ls)| (total - ak).exp() * ls).collect(),
        }
    }

    /// `(int exp(2 int_r^T L~) L_s^2 dr)^(1/2)`.
    pub fn amplification(&self) -> f64 {
        let sq: Vec<f64> = self.weights.iter().map(|w| w * w).collect();
        trapezoid(&self.r, &sq).sqrt()
    }

    /// Bound on the expected terminal error given a uniform score-error bound.
    pub fn expected_bound(&self, kappa: &[f64]) -> f64 {
        let sq: Vec<f64> = kappa.iter().map(|k| k * k).collect();
        self.amplification() * trapezoid(&self.r, &sq).sqrt()
    }

    /// Bound on one trajectory's terminal error given its score error along the oracle path.
    pub fn pathwise_bound(&self, score_error: &[f64]) -> f64 {
        let f: Vec<f64> = self.weights.iter().zip(score_error).map(|(w, e)| w * e).collect();
        trapezoid(&self.r, &f)
    }
}

/// Expected bound for constant `L~`, `L_s` and `kappa` on `[0, T]` with `n` intervals.
pub fn constant_expected_bound(l_tilde: f64, l_s: f64, kappa: f64, horizon: f64, n: usize) -> f64 {
    let r: Vec<f64> = (0..=n).map(|k| horizon * k as f64 / n as f64).collect();
    let kernel = GronwallKernel::new(&r, &vec![l_tilde; n + 1], &vec![l_s; n + 1]);
    kernel.expected_bound(&vec![kappa; n + 1])
}

/// `(Lambda(t), kappa(t))` for a bias-only estimator on a single Gaussian:
/// the spectral norm of its score Jacobian and a uniform bound on its error.
pub fn uniform_bound(spec: &EstimatorSpec, schedule: &NoiseSchedule, t: f64) -> Result<(f64, f64)> {
    if !spec.is_bias_only() {
        return Err(Error::NoUniformBound("the estimator is stochastic".into()));
    }
    if spec.base.n_components() != 1 {
        return Err(Error::NoUniformBound(
            "Lipschitz constants are only available for a single Gaussian base".into(),
        ));
    }
    let lambda = spec.base.score_lipschitz(schedule, t)?;
    let kappa = match &spec.bias {
        Bias::None => 0.0,
        Bias::Constant { b } => dot(b, b).sqrt(),
        Bias::MeanShift { delta } => {
            // The shifted score differs by the constant alpha P delta.
            let p = spec.base.marginal_precision(schedule, t)?;
            let (alpha, _) = schedule.alpha_sigma(t)?;
            (p * DVector::from_column_slice(delta)).norm() * alpha
        }
        Bias::Linear { .. } => {
            return Err(Error::NoUniformBound("a linear bias is unbounded in x".into()));
        }
    };
    Ok((lambda, kappa))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GronwallCertificate {
    /// Sampler grid, decreasing in `t`.
    pub t: Vec<f64>,
    pub l_x: Vec<f64>,
    pub l_s: Vec<f64>,
    pub lambda_hat: Vec<f64>,
    pub kappa: Vec<f64>,
    pub l_tilde: Vec<f64>,
    pub convention: crate::sampler::DriftConvention,
    pub expected_bound: f64,
    pub pathwise_bounds: Vec<f64>,
    pub measured: Vec<f64>,
    pub mean_measured: f64,
    pub mean_pathwise: f64,
    /// Number of pairs whose measured error exceeds its pathwise bound.
    pub violations: usize,
}

impl GronwallCertificate {
    pub fn slack(&self) -> Vec<f64> {
        self.pathwise_bounds.iter().zip(&self.measured).map(|(b, m)| b - m).collect()
    }

    pub fn holds(&self) -> bool {
        self.violations == 0 && self.expected_bound >= self.mean_measured
    }
}

/// Per-grid-point Lipschitz data for `dynamics` on the sampler grid `t`.
fn lipschitz_profile(dynamics: &OdeDynamics, t: &[f64], lambda: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let l_x: Vec<f64> = t.iter().map(|&ti| dynamics.lipschitz_x(ti)).collect();
    let l_s: Vec<f64> = t.iter().map(|&ti| dynamics.lipschitz_s(ti)).collect();
    let l_tilde = l_x.iter().zip(&l_s).zip(lambda).map(|((x, s), l)| x + s * l).collect();
    (l_x, l_s, l_tilde)
}

fn reverse_time(t: &[f64]) -> Vec<f64> {
    t.iter().map(|ti| 1.0 - ti).collect()
}

/// Score-error norms of `estimator` along each reference trajectory.
fn score_errors(oracle: &dyn ScoreField, estimator: &dyn ScoreField, t: &[f64], states: &[Vec<f64>]) -> Result<Vec<f64>> {
    let mut ctx = NoiseCtx::detached();
    t.iter()
        .zip(states)
        .enumerate()
        .map(|(k, (&tk, x))| {
            ctx.set_step(k as u64);
            let a = estimator.eval(tk, x, &mut ctx)?;
            let b = oracle.eval(tk, x, &mut ctx)?;
            Ok(a.iter().zip(&b).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt())
        })
        .collect()
}

/// Simulate `n_pairs` Euler pairs and compare them with the Gronwall bounds.
pub fn gronwall_certificate(
    spec: &EstimatorSpec,
    dynamics: &OdeDynamics,
    n_steps: usize,
    n_pairs: usize,
    seed: u64,
) -> Result<GronwallCertificate> {
    let sched = dynamics.schedule;
    let t = uniform_grid(n_steps);
    let bounds = t
        .iter()
        .map(|&ti| uniform_bound(spec, &sched, ti))
        .collect::<Result<Vec<_>>>()?;
    let lambda: Vec<f64> = bounds.iter().map(|b| b.0).collect();
    let kappa: Vec<f64> = bounds.iter().map(|b| b.1).collect();
    let (l_x, l_s, l_tilde) = lipschitz_profile(dynamics, &t, &lambda);
    let kernel = GronwallKernel::new(&reverse_time(&t), &l_tilde, &l_s);
    let expected_bound = kernel.expected_bound(&kappa);

    let oracle: FieldRef = Arc::new(OracleField::new(spec.base.clone(), sched));
    let estimator: FieldRef = Arc::new(make_estimator(spec, sched, seed)?);
    let pair_dynamics = PairDynamics::Ode {
        dynamics: *dynamics,
        integrator: Integrator::Euler,
    };
    let pairs = simulate_pairs(&oracle, &estimator, &pair_dynamics, n_steps, n_pairs, seed)?;
    let mut measured = Vec::with_capacity(n_pairs);
    let mut pathwise = Vec::with_capacity(n_pairs);
    for p in &pairs {
        let err = score_errors(oracle.as_ref(), estimator.as_ref(), &t, &p.reference.states)?;
        pathwise.push(kernel.pathwise_bound(&err));
        measured.push(p.terminal_error);
    }
    let violations = measured.iter().zip(&pathwise).filter(|(m, b)| m > b).count();
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    Ok(GronwallCertificate {
        mean_measured: mean(&measured),
        mean_pathwise: mean(&pathwise),
        t,
        l_x,
        l_s,
        lambda_hat: lambda,
        kappa,
        l_tilde,
        convention: dynamics.convention,
        expected_bound,
        pathwise_bounds: pathwise,
        measured,
        violations,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorollaryRow {
    pub w: f64,
    /// `int_0^1 E|s_w - s*|^2 dt`.
    pub integrated_mse: f64,
    pub certified_bound: f64,
    pub mean_terminal_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorollaryReport {
    pub rows: Vec<CorollaryRow>,
    /// Common amplification factor of all certified bounds.
    pub amplification: f64,
    /// Weights whose integrated MSE is strictly below both parents'.
    pub premise_holds: Vec<f64>,
    /// Weights where the premise holds but the certified bound does not shrink below both parents'.
    pub bound_violations: Vec<f64>,
    /// Weights where the premise holds and the measured error is below both parents'.
    pub measured_follow: Vec<f64>,
    pub measured_argmin: f64,
}

impl CorollaryReport {
    pub fn row(&self, w: f64) -> Option<&CorollaryRow> {
        self.rows.iter().find(|r| (r.w - w).abs() < 1e-12)
    }
}

/// Sweep `w` over `w_grid` for the composition `w s_1 + (1 - w) s_2` and
/// compare integrated score MSE, certified bounds and measured terminal errors.
pub fn corollary_check(
    pair: &EstimatorPair,
    w_grid: &[f64],
    dynamics: &OdeDynamics,
    n_steps: usize,
    n_pairs: usize,
    seed: u64,
) -> Result<CorollaryReport> {
    let sched = dynamics.schedule;
    let t = uniform_grid(n_steps);
    let d = pair.dim();
    let mut lambda = Vec::with_capacity(t.len());
    for &ti in &t {
        let (l1, _) = uniform_bound(&pair.first, &sched, ti)?;
        let (l2, _) = uniform_bound(&pair.second, &sched, ti)?;
        lambda.push(l1.max(l2));
    }
    let (_, l_s, l_tilde) = lipschitz_profile(dynamics, &t, &lambda);
    let r = reverse_time(&t);
    let kernel = GronwallKernel::new(&r, &l_tilde, &l_s);
    let amplification = kernel.amplification();
    // Bias-only estimators on a single Gaussian have x-independent errors.
    let origin = vec![0.0; d];
    let quads = t
        .iter()
        .map(|&ti| analytic_mse(pair, &sched, ti, &origin))
        .collect::<Result<Vec<_>>>()?;
    let integrated = |w: f64| {
        let q: Vec<f64> = quads.iter().map(|qd| qd.q(w)).collect();
        trapezoid(&r, &q)
    };

    let oracle: FieldRef = Arc::new(OracleField::new(pair.first.base.clone(), sched));
    let e1: FieldRef = Arc::new(make_estimator(&pair.first, sched, seed)?);
    let e2: FieldRef = Arc::new(make_estimator(&pair.second, sched, seed)?);
    let pair_dynamics = PairDynamics::Ode {
        dynamics: *dynamics,
        integrator: Integrator::Euler,
    };
    let mut rows = Vec::with_capacity(w_grid.len());
    for &w in w_grid {
        let composed: FieldRef = Arc::new(ComposedField::convex(vec![e1.clone(), e2.clone()], vec![w, 1.0 - w])?);
        let pairs = simulate_pairs(&oracle, &composed, &pair_dynamics, n_steps, n_pairs, seed)?;
        let mean_err = pairs.iter().map(|p| p.terminal_error).sum::<f64>() / n_pairs.max(1) as f64;
        let mse = integrated(w);
        rows.push(CorollaryRow {
            w,
            integrated_mse: mse,
            certified_bound: amplification * mse.sqrt(),
            mean_terminal_error: mean_err,
        });
    }

    let parent = |w: f64| -> Result<CorollaryRow> {
        let mse = integrated(w);
        let composed: FieldRef = if w == 1.0 { e1.clone() } else { e2.clone() };
        let pairs = simulate_pairs(&oracle, &composed, &pair_dynamics, n_steps, n_pairs, seed)?;
        Ok(CorollaryRow {
            w,
            integrated_mse: mse,
            certified_bound: amplification * mse.sqrt(),
            mean_terminal_error: pairs.iter().map(|p| p.terminal_error).sum::<f64>() / n_pairs.max(1) as f64,
        })
    };
    let (p1, p2) = (parent(1.0)?, parent(0.0)?);
    let mut premise_holds = Vec::new();
    let mut bound_violations = Vec::new();
    let mut measured_follow = Vec::new();
    for row in &rows {
        if row.integrated_mse < p1.integrated_mse.min(p2.integrated_mse) {
            premise_holds.push(row.w);
            if !(row.certified_bound < p1.certified_bound.min(p2.certified_bound)) {
                bound_violations.push(row.w);
            }
            if row.mean_terminal_error < p1.mean_terminal_error.min(p2.mean_terminal_error) {
                measured_follow.push(row.w);
            }
        }
    }
    let measured_argmin = rows
        .iter()
        .fold(None::<&CorollaryRow>, |best, r| match best {
            Some(b) if b.mean_terminal_error <= r.mean_terminal_error => Some(b),
            _ => Some(r),
        })
        .map(|r| r.w)
        .unwrap_or(0.0);
    Ok(CorollaryReport {
        rows,
        amplification,
        premise_holds,
        bound_violations,
        measured_follow,
        measured_argmin,
    })
}
