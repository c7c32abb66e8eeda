//! Forward-process schedules and per-step solver coefficients.
//!
//! Time is continuous on `[0, 1]` with `t = 0` the data end and `t = 1` the
//! noise end. The forward process is `x_t = alpha(t) x_0 + sigma(t) eps`.
//!
//! Every built-in solver is written as the affine update
//! `x_to = a * x_from + b * score(t_from, x_from) + c * xi`, `xi ~ N(0, sigma_step^2 I)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BETA_MIN: f64 = 0.1;
pub const DEFAULT_BETA_MAX: f64 = 20.0;

fn default_beta_min() -> f64 {
    DEFAULT_BETA_MIN
}

fn default_beta_max() -> f64 {
    DEFAULT_BETA_MAX
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum NoiseSchedule {
    /// Variance preserving, `beta(t)` linear in `t`.
    VpLinear {
        #[serde(default = "default_beta_min")]
        beta_min: f64,
        #[serde(default = "default_beta_max")]
        beta_max: f64,
    },
    /// Variance preserving, `sqrt(beta(t))` linear in `t`.
    VpScaledLinear {
        #[serde(default = "default_beta_min")]
        beta_min: f64,
        #[serde(default = "default_beta_max")]
        beta_max: f64,
    },
    /// Rectified-flow interpolant, `alpha = 1 - t`, `sigma = t`.
    FlowLinear,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule::vp_linear()
    }
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain {
            what: "t",
            value: t,
            lo: 0.0,
            hi: 1.0,
        });
    }
    Ok(())
}

impl NoiseSchedule {
    pub fn vp_linear() -> Self {
        NoiseSchedule::VpLinear {
            beta_min: DEFAULT_BETA_MIN,
            beta_max: DEFAULT_BETA_MAX,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            NoiseSchedule::VpLinear { beta_min, beta_max }
            | NoiseSchedule::VpScaledLinear { beta_min, beta_max } => {
                if !(beta_min >= 0.0 && beta_max >= beta_min && beta_max > 0.0)
                    || !beta_max.is_finite()
                {
                    return Err(Error::Construction(format!(
                        "beta range must satisfy 0 <= beta_min <= beta_max, beta_max > 0 (got {beta_min}, {beta_max})"
                    )));
                }
                Ok(())
            }
            NoiseSchedule::FlowLinear => Ok(()),
        }
    }

    pub fn is_variance_preserving(&self) -> bool {
        !matches!(self, NoiseSchedule::FlowLinear)
    }

    /// Instantaneous noise rate. Zero for the flow schedule, which is not
    /// defined through a rate.
    pub fn beta(&self, t: f64) -> f64 {
        match *self {
            NoiseSchedule::VpLinear { beta_min, beta_max } => beta_min + t * (beta_max - beta_min),
            NoiseSchedule::VpScaledLinear { beta_min, beta_max } => {
                let r = beta_min.sqrt() + t * (beta_max.sqrt() - beta_min.sqrt());
                r * r
            }
            NoiseSchedule::FlowLinear => 0.0,
        }
    }

    /// Closed-form `int_0^t beta(u) du`.
    pub fn integrated_beta(&self, t: f64) -> f64 {
        match *self {
            NoiseSchedule::VpLinear { beta_min, beta_max } => {
                beta_min * t + 0.5 * (beta_max - beta_min) * t * t
            }
            NoiseSchedule::VpScaledLinear { beta_min, beta_max } => {
                let a = beta_min.sqrt();
                let c = beta_max.sqrt() - a;
                a * a * t + a * c * t * t + c * c * t * t * t / 3.0
            }
            NoiseSchedule::FlowLinear => 0.0,
        }
    }

    pub fn alpha_sigma(&self, t: f64) -> Result<(f64, f64)> {
        check_time(t)?;
        Ok(self.alpha_sigma_unchecked(t))
    }

    pub(crate) fn alpha_sigma_unchecked(&self, t: f64) -> (f64, f64) {
        match self {
            NoiseSchedule::FlowLinear => (1.0 - t, t),
            _ => {
                let big_b = self.integrated_beta(t);
                ((-0.5 * big_b).exp(), (-(-big_b).exp_m1()).sqrt())
            }
        }
    }

    /// `(alpha * alpha', sigma * sigma')`; finite on the whole interval.
    pub fn half_variance_rates(&self, t: f64) -> (f64, f64) {
        match self {
            NoiseSchedule::FlowLinear => (-(1.0 - t), t),
            _ => {
                let (alpha, _) = self.alpha_sigma_unchecked(t);
                let r = 0.5 * self.beta(t) * alpha * alpha;
                (-r, r)
            }
        }
    }

    /// `d alpha / dt`.
    pub fn alpha_dot(&self, t: f64) -> f64 {
        match self {
            NoiseSchedule::FlowLinear => -1.0,
            _ => -0.5 * self.beta(t) * self.alpha_sigma_unchecked(t).0,
        }
    }

    /// Drift coefficient `f(t) = alpha'/alpha` of the forward SDE `dx = f x dt + g dW`.
    /// Infinite where `alpha = 0`.
    pub fn drift_coefficient(&self, t: f64) -> f64 {
        match self {
            NoiseSchedule::FlowLinear => -1.0 / (1.0 - t),
            _ => -0.5 * self.beta(t),
        }
    }

    /// Squared diffusion coefficient `g(t)^2 = 2 sigma sigma' - 2 f sigma^2`.
    pub fn diffusion_sq(&self, t: f64) -> f64 {
        match self {
            NoiseSchedule::FlowLinear => 2.0 * t / (1.0 - t),
            _ => self.beta(t),
        }
    }

    /// Coefficient `c(t)` in `eps = alpha v + c(t) x`. Equals `sigma(t)` for the
    /// variance-preserving kinds and `1` for the flow interpolant.
    pub fn velocity_state_coefficient(&self, t: f64) -> f64 {
        match self {
            NoiseSchedule::FlowLinear => 1.0,
            _ => self.alpha_sigma_unchecked(t).1,
        }
    }

    /// Ratio between the time derivative of the state and the velocity
    /// prediction, `dx/dt = W(t) v`. `W = 1` for the flow interpolant,
    /// `beta alpha / (2 sigma)` for variance preserving kinds (infinite at `t = 0`).
    pub fn velocity_time_scale(&self, t: f64) -> f64 {
        match self {
            NoiseSchedule::FlowLinear => 1.0,
            _ => {
                let (alpha, sigma) = self.alpha_sigma_unchecked(t);
                0.5 * self.beta(t) * alpha / sigma
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            NoiseSchedule::VpLinear { .. } => "vp-linear",
            NoiseSchedule::VpScaledLinear { .. } => "vp-scaled-linear",
            NoiseSchedule::FlowLinear => "flow-linear",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Solver {
    /// Ancestral sampling with the exact Gaussian posterior `q(x_s | x_t, x_0)`.
    Ddpm,
    /// Deterministic DDIM (`eta = 0`).
    Ddim,
    /// Explicit Euler on the probability-flow ODE.
    PfOdeEuler,
    /// Explicit Euler on the velocity field `dx/dt = W(t) v`.
    FlowEuler,
}

impl Solver {
    pub fn is_deterministic(&self) -> bool {
        !matches!(self, Solver::Ddpm)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Solver::Ddpm => "ddpm",
            Solver::Ddim => "ddim",
            Solver::PfOdeEuler => "pf-ode-euler",
            Solver::FlowEuler => "flow-euler",
        }
    }
}

impl std::fmt::Display for Solver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Solver {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddpm" => Ok(Solver::Ddpm),
            "ddim" => Ok(Solver::Ddim),
            "pf-ode-euler" => Ok(Solver::PfOdeEuler),
            "flow-euler" => Ok(Solver::FlowEuler),
            other => Err(Error::Config(format!("unknown solver `{other}`"))),
        }
    }
}

/// Coefficients of one update `x_to = a x + b s + c xi`, `xi ~ N(0, sigma_step^2 I)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepCoefficients {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub sigma_step: f64,
}

impl StepCoefficients {
    pub const IDENTITY: StepCoefficients = StepCoefficients {
        a: 1.0,
        b: 0.0,
        c: 0.0,
        sigma_step: 0.0,
    };

    pub fn is_stochastic(&self) -> bool {
        self.c > 0.0 && self.sigma_step > 0.0
    }

    /// Apply the update in place. `xi` must be standard normal when the step is stochastic.
    pub fn apply(&self, x: &mut [f64], score: &[f64], xi: Option<&[f64]>) {
        let scale = self.c * self.sigma_step;
        match xi {
            Some(xi) if scale > 0.0 => {
                for ((xi_out, s), n) in x.iter_mut().zip(score).zip(xi) {
                    *xi_out = self.a * *xi_out + self.b * s + scale * n;
                }
            }
            _ => {
                for (xi_out, s) in x.iter_mut().zip(score) {
                    *xi_out = self.a * *xi_out + self.b * s;
                }
            }
        }
    }
}

fn singular(from: &'static str, t: f64, alpha: f64, sigma: f64) -> Error {
    Error::SingularTime {
        from,
        to: "step",
        t,
        alpha,
        sigma,
    }
}

/// Coefficients reproducing `solver` for one step from `t_from` down to `t_to`
/// when the exact score is plugged in.
pub fn step_coefficients(
    schedule: &NoiseSchedule,
    solver: Solver,
    t_from: f64,
    t_to: f64,
) -> Result<StepCoefficients> {
    check_time(t_from)?;
    check_time(t_to)?;
    if t_to > t_from {
        return Err(Error::Ordering { t_from, t_to });
    }
    if t_to == t_from {
        return Ok(StepCoefficients::IDENTITY);
    }
    let (alpha_t, sigma_t) = schedule.alpha_sigma_unchecked(t_from);
    let (alpha_s, sigma_s) = schedule.alpha_sigma_unchecked(t_to);

    match solver {
        Solver::Ddim => {
            if alpha_t <= 0.0 {
                return Err(singular("ddim", t_from, alpha_t, sigma_t));
            }
            Ok(StepCoefficients {
                a: alpha_s / alpha_t,
                b: sigma_t * (alpha_s * sigma_t / alpha_t - sigma_s),
                c: 0.0,
                sigma_step: 0.0,
            })
        }
        Solver::Ddpm => {
            if alpha_t <= 0.0 || sigma_t <= 0.0 {
                return Err(singular("ddpm", t_from, alpha_t, sigma_t));
            }
            let alpha_ts = alpha_t / alpha_s;
            // sigma_{t|s}^2 = sigma_t^2 - alpha_{t|s}^2 sigma_s^2
            let var_ts = if schedule.is_variance_preserving() {
                -(-(schedule.integrated_beta(t_from) - schedule.integrated_beta(t_to))).exp_m1()
            } else {
                (sigma_t * sigma_t - alpha_ts * alpha_ts * sigma_s * sigma_s).max(0.0)
            };
            let var_t = sigma_t * sigma_t;
            let b = alpha_s * var_ts / alpha_t;
            Ok(StepCoefficients {
                a: alpha_ts * sigma_s * sigma_s / var_t + b / var_t,
                b,
                c: (var_ts * sigma_s * sigma_s / var_t).sqrt(),
                sigma_step: 1.0,
            })
        }
        Solver::PfOdeEuler | Solver::FlowEuler => {
            let h = t_to - t_from;
            let f = schedule.drift_coefficient(t_from);
            let g2 = schedule.diffusion_sq(t_from);
            if !f.is_finite() || !g2.is_finite() {
                return Err(singular(solver.name(), t_from, alpha_t, sigma_t));
            }
            Ok(StepCoefficients {
                a: 1.0 + h * f,
                b: -0.5 * h * g2,
                c: 0.0,
                sigma_step: 0.0,
            })
        }
    }
}

/// Uniform grid from `1` down to `0` with `n_steps` intervals.
pub fn uniform_grid(n_steps: usize) -> Vec<f64> {
    let n = n_steps as f64;
    (0..=n_steps)
        .map(|k| if k == n_steps { 0.0 } else { 1.0 - k as f64 / n })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const VP: NoiseSchedule = NoiseSchedule::VpLinear {
        beta_min: 0.1,
        beta_max: 20.0,
    };
    const SCALED: NoiseSchedule = NoiseSchedule::VpScaledLinear {
        beta_min: 0.1,
        beta_max: 20.0,
    };

    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut acc = f(a) + f(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f(a + i as f64 * h);
        }
        acc * h / 3.0
    }

    #[test]
    fn flow_endpoints_and_interpolation() {
        let s = NoiseSchedule::FlowLinear;
        assert_eq!(s.alpha_sigma(0.0).unwrap(), (1.0, 0.0));
        assert_eq!(s.alpha_sigma(0.25).unwrap(), (0.75, 0.25));
    }

    #[test]
    fn vp_alpha_matches_quadrature_of_beta() {
        for sched in [VP, SCALED] {
            let (alpha, sigma) = sched.alpha_sigma(0.5).unwrap();
            let integral = simpson(|u| sched.beta(u), 0.0, 0.5, 2000);
            assert!((alpha - (-0.5 * integral).exp()).abs() < 1e-12);
            assert!((alpha * alpha + sigma * sigma - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_range_time_is_a_domain_error() {
        assert!(matches!(VP.alpha_sigma(1.5), Err(Error::Domain { .. })));
        assert!(matches!(VP.alpha_sigma(-0.1), Err(Error::Domain { .. })));
    }

    #[test]
    fn vp_invariants_on_a_fine_grid() {
        for sched in [VP, SCALED, NoiseSchedule::FlowLinear] {
            let (a0, s0) = sched.alpha_sigma(0.0).unwrap();
            assert!((a0 - 1.0).abs() < 1e-9 && s0.abs() < 1e-9);
            let mut prev = (a0, s0);
            for k in 1..=1000 {
                let (a, s) = sched.alpha_sigma(k as f64 * 1e-3).unwrap();
                if sched.is_variance_preserving() {
                    assert!((a * a + s * s - 1.0).abs() < 1e-9);
                }
                assert!(a <= prev.0 && s >= prev.1);
                prev = (a, s);
            }
        }
    }

    #[test]
    fn analytic_rates_match_finite_differences() {
        for sched in [VP, SCALED, NoiseSchedule::FlowLinear] {
            for &t in &[0.1, 0.4, 0.8] {
                let h = 1e-6;
                let (ap, sp) = sched.alpha_sigma(t + h).unwrap();
                let (am, sm) = sched.alpha_sigma(t - h).unwrap();
                let (a, s) = sched.alpha_sigma(t).unwrap();
                let (aa, ss) = sched.half_variance_rates(t);
                assert!((aa - a * (ap - am) / (2.0 * h)).abs() < 1e-6);
                assert!((ss - s * (sp - sm) / (2.0 * h)).abs() < 1e-6);
                assert!((sched.alpha_dot(t) - (ap - am) / (2.0 * h)).abs() < 1e-6);
                let g2 = 2.0 * ss - 2.0 * sched.drift_coefficient(t) * s * s;
                assert!((g2 - sched.diffusion_sq(t)).abs() < 1e-9 * (1.0 + g2));
            }
        }
    }

    #[test]
    fn zero_length_step_is_identity() {
        for solver in [Solver::Ddpm, Solver::Ddim, Solver::PfOdeEuler, Solver::FlowEuler] {
            assert_eq!(
                step_coefficients(&VP, solver, 0.3, 0.3).unwrap(),
                StepCoefficients::IDENTITY
            );
        }
    }

    #[test]
    fn reversed_step_is_an_ordering_error() {
        assert!(matches!(
            step_coefficients(&VP, Solver::Ddim, 0.2, 0.3),
            Err(Error::Ordering { .. })
        ));
    }

    #[test]
    fn deterministic_solvers_have_no_noise() {
        for solver in [Solver::Ddim, Solver::PfOdeEuler, Solver::FlowEuler] {
            let c = step_coefficients(&VP, solver, 0.6, 0.5).unwrap();
            assert_eq!(c.c, 0.0);
            assert!(!c.is_stochastic());
        }
        let c = step_coefficients(&VP, Solver::Ddpm, 0.6, 0.5).unwrap();
        assert!(c.c > 0.0);
    }

    #[test]
    fn flow_euler_is_the_velocity_euler_step() {
        // For the linear interpolant, v = eps - x0 and the Euler step is x + (t_to - t_from) v.
        let s = NoiseSchedule::FlowLinear;
        let (t_from, t_to) = (0.7, 0.6);
        let (alpha, sigma) = s.alpha_sigma(t_from).unwrap();
        let (x, score) = (0.8_f64, -1.3_f64);
        let eps = -sigma * score;
        let x0 = (x - sigma * eps) / alpha;
        let euler = x + (t_to - t_from) * (eps - x0);
        let c = step_coefficients(&s, Solver::FlowEuler, t_from, t_to).unwrap();
        assert!((c.a * x + c.b * score - euler).abs() < 1e-14);
    }

    #[test]
    fn ddim_final_step_returns_denoised_estimate() {
        let (t, x, score) = (0.01, 0.3, -2.0);
        let (alpha, sigma) = VP.alpha_sigma(t).unwrap();
        let c = step_coefficients(&VP, Solver::Ddim, t, 0.0).unwrap();
        let x0 = (x + sigma * sigma * score) / alpha;
        assert!((c.a * x + c.b * score - x0).abs() < 1e-14);
    }

    #[test]
    fn ddpm_preserves_the_standard_normal_to_first_order() {
        // With s = -x, one DDPM step maps N(0,1) to N(0, (a-b)^2 + c^2).
        let c = step_coefficients(&VP, Solver::Ddpm, 0.501, 0.5).unwrap();
        let var = (c.a - c.b).powi(2) + c.c * c.c;
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn flow_start_is_singular_for_score_solvers() {
        let s = NoiseSchedule::FlowLinear;
        for solver in [Solver::Ddim, Solver::Ddpm, Solver::PfOdeEuler] {
            assert!(matches!(
                step_coefficients(&s, solver, 1.0, 0.9),
                Err(Error::SingularTime { .. })
            ));
        }
    }

    #[test]
    fn grid_is_strictly_decreasing() {
        let g = uniform_grid(10);
        assert_eq!(g.len(), 11);
        assert_eq!(g[0], 1.0);
        assert_eq!(g[10], 0.0);
        assert!(g.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn schedule_round_trips_through_toml() {
        #[derive(Serialize, Deserialize)]
        struct Wrap {
            schedule: NoiseSchedule,
        }
        let src = "[schedule]\nkind = \"vp-linear\"\n";
        let w: Wrap = toml::from_str(src).unwrap();
        assert_eq!(w.schedule, VP);
        let out = toml::to_string(&w).unwrap();
        let back: Wrap = toml::from_str(&out).unwrap();
        assert_eq!(back.schedule, VP);
    }
}
