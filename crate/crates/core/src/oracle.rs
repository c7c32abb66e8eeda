//! Gaussian-mixture ground truth and perturbed estimators.
//!
//! The time-`t` marginal of a mixture `sum_k w_k N(mu_k, Sigma_k)` under the
//! forward process is `sum_k w_k N(alpha mu_k, alpha^2 Sigma_k + sigma^2 I)`,
//! so score, log-density and its time derivative are all available in closed
//! form.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::field::{NoiseCtx, Provenance, ScoreField};
use crate::rng::{self, Stream};
use crate::schedule::NoiseSchedule;

const WEIGHT_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentSpec {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub components: Vec<ComponentSpec>,
}

#[derive(Clone, Debug)]
struct Component {
    weight: f64,
    mean: Vec<f64>,
    cov: DMatrix<f64>,
    /// Lower Cholesky factor of `cov`.
    chol: DMatrix<f64>,
}

#[derive(Clone, Debug)]
pub struct GaussianMixture {
    dim: usize,
    components: Vec<Component>,
}

pub(crate) fn matrix_from_rows(rows: &[Vec<f64>], dim: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
        return Err(Error::Construction(format!("{what} must be {dim}x{dim}")));
    }
    Ok(DMatrix::from_fn(dim, dim, |i, j| rows[i][j]))
}

pub(crate) fn spd_cholesky(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let sym_err = (m - m.transpose()).abs().max();
    if sym_err > 1e-12 * (1.0 + m.abs().max()) {
        return Err(Error::Construction(format!("{what} is not symmetric")));
    }
    m.clone()
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::Construction(format!("{what} is not positive definite")))
}

impl GaussianMixture {
    pub fn new(spec: &MixtureSpec) -> Result<Self> {
        let first = spec
            .components
            .first()
            .ok_or_else(|| Error::Construction("mixture needs at least one component".into()))?;
        let dim = first.mean.len();
        if dim == 0 {
            return Err(Error::Construction("mixture dimension must be positive".into()));
        }
        let mut total = 0.0;
        let mut components = Vec::with_capacity(spec.components.len());
        for (k, c) in spec.components.iter().enumerate() {
            if !(c.weight > 0.0) || !c.weight.is_finite() {
                return Err(Error::Construction(format!("component {k}: weight must be positive")));
            }
            if c.mean.len() != dim {
                return Err(Error::Construction(format!(
                    "component {k}: mean has dimension {}, expected {dim}",
                    c.mean.len()
                )));
            }
            let cov = matrix_from_rows(&c.cov, dim, &format!("component {k} covariance"))?;
            let chol = spd_cholesky(&cov, &format!("component {k} covariance"))?;
            total += c.weight;
            components.push(Component {
                weight: c.weight,
                mean: c.mean.clone(),
                cov,
                chol,
            });
        }
        if (total - 1.0).abs() > WEIGHT_TOL {
            return Err(Error::Construction(format!(
                "mixture weights sum to {total}, expected 1"
            )));
        }
        Ok(GaussianMixture { dim, components })
    }

    pub fn gaussian(mean: Vec<f64>, cov: Vec<Vec<f64>>) -> Result<Self> {
        GaussianMixture::new(&MixtureSpec {
            components: vec![ComponentSpec {
                weight: 1.0,
                mean,
                cov,
            }],
        })
    }

    /// `N(mean, var * I)`.
    pub fn isotropic(mean: Vec<f64>, var: f64) -> Result<Self> {
        let d = mean.len();
        GaussianMixture::gaussian(mean, scaled_identity(d, var))
    }

    pub fn standard_normal(dim: usize) -> Self {
        GaussianMixture::isotropic(vec![0.0; dim], 1.0).expect("standard normal is valid")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn spec(&self) -> MixtureSpec {
        MixtureSpec {
            components: self
                .components
                .iter()
                .map(|c| ComponentSpec {
                    weight: c.weight,
                    mean: c.mean.clone(),
                    cov: (0..self.dim)
                        .map(|i| (0..self.dim).map(|j| c.cov[(i, j)]).collect())
                        .collect(),
                })
                .collect(),
        }
    }

    /// Same mixture with every mean translated by `delta`.
    pub fn shifted(&self, delta: &[f64]) -> Result<Self> {
        check_dim(self.dim, delta.len())?;
        let mut out = self.clone();
        for c in &mut out.components {
            for (m, d) in c.mean.iter_mut().zip(delta) {
                *m += d;
            }
        }
        Ok(out)
    }

    pub fn marginal(&self, schedule: &NoiseSchedule, t: f64) -> Result<Marginal> {
        let (alpha, sigma) = schedule.alpha_sigma(t)?;
        let (alpha_alpha_dot, sigma_sigma_dot) = schedule.half_variance_rates(t);
        let alpha_dot = schedule.alpha_dot(t);
        let d = self.dim;
        let mut comps = Vec::with_capacity(self.components.len());
        for c in &self.components {
            let cov_t = &c.cov * (alpha * alpha) + DMatrix::identity(d, d) * (sigma * sigma);
            let chol = cov_t
                .clone()
                .cholesky()
                .ok_or_else(|| Error::Construction("marginal covariance lost definiteness".into()))?;
            let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            let prec = chol.inverse();
            let cov_rate = &c.cov * (2.0 * alpha_alpha_dot)
                + DMatrix::identity(d, d) * (2.0 * sigma_sigma_dot);
            let trace_term = (&prec * &cov_rate).trace();
            comps.push(MarginalComponent {
                log_norm: c.weight.ln() - 0.5 * d as f64 * (2.0 * PI).ln() - 0.5 * log_det,
                mean: c.mean.iter().map(|m| alpha * m).collect(),
                precision: row_major(&prec),
                cov_rate: row_major(&cov_rate),
                mean_rate: c.mean.iter().map(|m| alpha_dot * m).collect(),
                trace_term,
            });
        }
        Ok(Marginal { dim: d, comps })
    }

    /// Spectral norm of the score Jacobian `(alpha^2 Sigma + sigma^2 I)^{-1}`
    /// for a single-component law.
    pub fn score_lipschitz(&self, schedule: &NoiseSchedule, t: f64) -> Result<f64> {
        if self.components.len() != 1 {
            return Err(Error::Construction(
                "closed-form Lipschitz constant needs a single Gaussian".into(),
            ));
        }
        let (alpha, sigma) = schedule.alpha_sigma(t)?;
        let c = &self.components[0];
        let cov_t = &c.cov * (alpha * alpha) + DMatrix::identity(self.dim, self.dim) * (sigma * sigma);
        let min_eig = cov_t.symmetric_eigenvalues().min();
        Ok(1.0 / min_eig)
    }

    /// Precision matrix of the single-component marginal at `t`.
    pub fn marginal_precision(&self, schedule: &NoiseSchedule, t: f64) -> Result<DMatrix<f64>> {
        if self.components.len() != 1 {
            return Err(Error::Construction("marginal precision needs a single Gaussian".into()));
        }
        let (alpha, sigma) = schedule.alpha_sigma(t)?;
        let c = &self.components[0];
        let cov_t = &c.cov * (alpha * alpha) + DMatrix::identity(self.dim, self.dim) * (sigma * sigma);
        cov_t
            .cholesky()
            .map(|ch| ch.inverse())
            .ok_or_else(|| Error::Construction("marginal covariance lost definiteness".into()))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = self.components.len() - 1;
                for (k, c) in self.components.iter().enumerate() {
                    acc += c.weight;
                    if u < acc {
                        pick = k;
                        break;
                    }
                }
                let c = &self.components[pick];
                let z: DVector<f64> = DVector::from_iterator(
                    self.dim,
                    (0..self.dim).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)),
                );
                let y = &c.chol * z;
                c.mean.iter().zip(y.iter()).map(|(m, v)| m + v).collect()
            })
            .collect()
    }

    pub fn score(&self, schedule: &NoiseSchedule, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim, x.len())?;
        Ok(self.marginal(schedule, t)?.score(x))
    }

    pub fn log_density(&self, schedule: &NoiseSchedule, t: f64, x: &[f64]) -> Result<f64> {
        check_dim(self.dim, x.len())?;
        Ok(self.marginal(schedule, t)?.log_density(x))
    }

    pub fn dt_log_density(&self, schedule: &NoiseSchedule, t: f64, x: &[f64]) -> Result<f64> {
        check_dim(self.dim, x.len())?;
        Ok(self.marginal(schedule, t)?.dt_log_density(x))
    }
}

pub(crate) fn scaled_identity(d: usize, v: f64) -> Vec<Vec<f64>> {
    (0..d)
        .map(|i| (0..d).map(|j| if i == j { v } else { 0.0 }).collect())
        .collect()
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let (r, c) = m.shape();
    (0..r).flat_map(|i| (0..c).map(move |j| m[(i, j)])).collect()
}

#[inline]
fn mat_vec(m: &[f64], v: &[f64], out: &mut [f64]) {
    let d = v.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &m[i * d..(i + 1) * d];
        *o = row.iter().zip(v).map(|(a, b)| a * b).sum();
    }
}

#[derive(Clone, Debug)]
struct MarginalComponent {
    log_norm: f64,
    mean: Vec<f64>,
    precision: Vec<f64>,
    cov_rate: Vec<f64>,
    mean_rate: Vec<f64>,
    trace_term: f64,
}

/// Time-`t` marginal of a mixture, precomputed for repeated evaluation.
#[derive(Clone, Debug)]
pub struct Marginal {
    dim: usize,
    comps: Vec<MarginalComponent>,
}

impl Marginal {
    /// Per component: log of the weighted density and `P (x - m)`.
    fn terms(&self, x: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let d = self.dim;
        let mut logs = Vec::with_capacity(self.comps.len());
        let mut pr = Vec::with_capacity(self.comps.len());
        let mut r = vec![0.0; d];
        for c in &self.comps {
            for i in 0..d {
                r[i] = x[i] - c.mean[i];
            }
            let mut p = vec![0.0; d];
            mat_vec(&c.precision, &r, &mut p);
            let quad: f64 = r.iter().zip(&p).map(|(a, b)| a * b).sum();
            logs.push(c.log_norm - 0.5 * quad);
            pr.push(p);
        }
        (logs, pr)
    }

    fn responsibilities(logs: &[f64]) -> (f64, Vec<f64>) {
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let ws: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let sum: f64 = ws.iter().sum();
        (max + sum.ln(), ws.into_iter().map(|w| w / sum).collect())
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let (logs, _) = self.terms(x);
        Self::responsibilities(&logs).0
    }

    pub fn score(&self, x: &[f64]) -> Vec<f64> {
        let (logs, pr) = self.terms(x);
        if pr.len() == 1 {
            return pr[0].iter().map(|v| -v).collect();
        }
        let (_, gamma) = Self::responsibilities(&logs);
        let mut out = vec![0.0; self.dim];
        for (g, p) in gamma.iter().zip(&pr) {
            for (o, v) in out.iter_mut().zip(p) {
                *o -= g * v;
            }
        }
        out
    }

    pub fn dt_log_density(&self, x: &[f64]) -> f64 {
        let (logs, pr) = self.terms(x);
        let (_, gamma) = Self::responsibilities(&logs);
        let d = self.dim;
        let mut tmp = vec![0.0; d];
        gamma
            .iter()
            .zip(&pr)
            .zip(&self.comps)
            .map(|((g, p), c)| {
                mat_vec(&c.cov_rate, p, &mut tmp);
                let quad: f64 = p.iter().zip(&tmp).map(|(a, b)| a * b).sum();
                let drift: f64 = p.iter().zip(&c.mean_rate).map(|(a, b)| a * b).sum();
                g * (-0.5 * c.trace_term + 0.5 * quad + drift)
            })
            .sum()
    }
}

/// The exact score of a mixture's noised marginals.
#[derive(Clone, Debug)]
pub struct OracleField {
    mixture: Arc<GaussianMixture>,
    schedule: NoiseSchedule,
}

impl OracleField {
    pub fn new(mixture: Arc<GaussianMixture>, schedule: NoiseSchedule) -> Self {
        OracleField { mixture, schedule }
    }

    pub fn mixture(&self) -> &Arc<GaussianMixture> {
        &self.mixture
    }
}

impl ScoreField for OracleField {
    fn dim(&self) -> usize {
        self.mixture.dim()
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn provenance(&self) -> Provenance {
        Provenance::Oracle
    }

    fn eval(&self, t: f64, x: &[f64], _ctx: &mut NoiseCtx) -> Result<Vec<f64>> {
        self.mixture.score(&self.schedule, t, x)
    }

    fn eval_batch(
        &self,
        t: f64,
        xs: &[Vec<f64>],
        _ctxs: &mut [NoiseCtx],
    ) -> Result<Vec<Vec<f64>>> {
        let m = self.mixture.marginal(&self.schedule, t)?;
        xs.iter()
            .map(|x| {
                check_dim(self.dim(), x.len())?;
                Ok(m.score(x))
            })
            .collect()
    }

    fn has_log_density(&self) -> bool {
        true
    }

    fn has_time_derivative(&self) -> bool {
        true
    }

    fn log_density(&self, t: f64, x: &[f64]) -> Result<f64> {
        self.mixture.log_density(&self.schedule, t, x)
    }

    fn dt_log_density(&self, t: f64, x: &[f64]) -> Result<f64> {
        self.mixture.dt_log_density(&self.schedule, t, x)
    }
}

pub fn oracle_score(mix: &GaussianMixture, schedule: &NoiseSchedule, t: f64, x: &[f64]) -> Result<Vec<f64>> {
    mix.score(schedule, t, x)
}

pub fn oracle_logdensity(mix: &GaussianMixture, schedule: &NoiseSchedule, t: f64, x: &[f64]) -> Result<f64> {
    mix.log_density(schedule, t, x)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Bias {
    #[default]
    None,
    Constant {
        b: Vec<f64>,
    },
    Linear {
        g: Vec<Vec<f64>>,
    },
    /// Exact score of the same mixture with means translated by `delta`.
    MeanShift {
        delta: Vec<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum NoiseSpec {
    #[default]
    None,
    Gaussian {
        cov: Vec<Vec<f64>>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Freshness {
    #[default]
    PerCall,
    FrozenPerTrajectory,
}

/// `eps = s* + b(t, x) + eta` over a base mixture.
#[derive(Clone, Debug)]
pub struct EstimatorSpec {
    pub base: Arc<GaussianMixture>,
    pub bias: Bias,
    pub noise: NoiseSpec,
    pub freshness: Freshness,
}

impl EstimatorSpec {
    pub fn exact(base: Arc<GaussianMixture>) -> Self {
        EstimatorSpec {
            base,
            bias: Bias::None,
            noise: NoiseSpec::None,
            freshness: Freshness::PerCall,
        }
    }

    pub fn with_bias(mut self, bias: Bias) -> Self {
        self.bias = bias;
        self
    }

    pub fn with_noise(mut self, noise: NoiseSpec, freshness: Freshness) -> Self {
        self.noise = noise;
        self.freshness = freshness;
        self
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    /// Noise covariance as a matrix (zero when noiseless).
    pub fn noise_cov(&self) -> Result<DMatrix<f64>> {
        let d = self.dim();
        match &self.noise {
            NoiseSpec::None => Ok(DMatrix::zeros(d, d)),
            NoiseSpec::Gaussian { cov } => matrix_from_rows(cov, d, "noise covariance"),
        }
    }

    /// Lower factor `L` with `L L^T` the noise covariance (zero when noiseless).
    pub fn noise_factor(&self) -> Result<DMatrix<f64>> {
        match &self.noise {
            NoiseSpec::None => Ok(DMatrix::zeros(self.dim(), self.dim())),
            NoiseSpec::Gaussian { .. } => spd_cholesky(&self.noise_cov()?, "noise covariance"),
        }
    }

    pub fn is_bias_only(&self) -> bool {
        matches!(self.noise, NoiseSpec::None)
    }

    fn validate(&self) -> Result<()> {
        let d = self.dim();
        match &self.bias {
            Bias::None => {}
            Bias::Constant { b } => check_dim(d, b.len())?,
            Bias::MeanShift { delta } => check_dim(d, delta.len())?,
            Bias::Linear { g } => {
                matrix_from_rows(g, d, "linear bias matrix")?;
            }
        }
        self.noise_factor()?;
        Ok(())
    }
}

/// A score field realizing an [`EstimatorSpec`].
#[derive(Clone, Debug)]
pub struct EstimatorField {
    spec: EstimatorSpec,
    oracle: OracleField,
    shifted: Option<OracleField>,
    linear: Option<Vec<f64>>,
    noise_factor: Option<Vec<f64>>,
    seed: u64,
}

pub fn make_estimator(spec: &EstimatorSpec, schedule: NoiseSchedule, seed: u64) -> Result<EstimatorField> {
    schedule.validate()?;
    spec.validate()?;
    let shifted = match &spec.bias {
        Bias::MeanShift { delta } => Some(OracleField::new(
            Arc::new(spec.base.shifted(delta)?),
            schedule,
        )),
        _ => None,
    };
    let linear = match &spec.bias {
        Bias::Linear { g } => Some(g.iter().flatten().copied().collect()),
        _ => None,
    };
    let noise_factor = match &spec.noise {
        NoiseSpec::None => None,
        NoiseSpec::Gaussian { .. } => Some(row_major(&spec.noise_factor()?)),
    };
    Ok(EstimatorField {
        spec: spec.clone(),
        oracle: OracleField::new(spec.base.clone(), schedule),
        shifted,
        linear,
        noise_factor,
        seed,
    })
}

impl EstimatorField {
    pub fn spec(&self) -> &EstimatorSpec {
        &self.spec
    }

    pub fn oracle(&self) -> &OracleField {
        &self.oracle
    }

    /// Deterministic part of the error, `b(t, x)`.
    pub fn bias_at(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim();
        check_dim(d, x.len())?;
        Ok(match &self.spec.bias {
            Bias::None => vec![0.0; d],
            Bias::Constant { b } => b.clone(),
            Bias::Linear { .. } => {
                let mut out = vec![0.0; d];
                mat_vec(self.linear.as_ref().expect("linear bias"), x, &mut out);
                out
            }
            Bias::MeanShift { .. } => {
                let shifted = self.spec.base.shifted(match &self.spec.bias {
                    Bias::MeanShift { delta } => delta,
                    _ => unreachable!(),
                })?;
                let s = shifted.score(&self.oracle.schedule, t, x)?;
                let base = self.spec.base.score(&self.oracle.schedule, t, x)?;
                s.iter().zip(&base).map(|(a, b)| a - b).collect()
            }
        })
    }

    fn deterministic_part(&self, base: Vec<f64>, x: &[f64]) -> Vec<f64> {
        let mut out = base;
        match &self.spec.bias {
            Bias::Constant { b } => {
                for (o, v) in out.iter_mut().zip(b) {
                    *o += v;
                }
            }
            Bias::Linear { .. } => {
                let mut gx = vec![0.0; x.len()];
                mat_vec(self.linear.as_ref().expect("linear bias"), x, &mut gx);
                for (o, v) in out.iter_mut().zip(&gx) {
                    *o += v;
                }
            }
            Bias::None | Bias::MeanShift { .. } => {}
        }
        out
    }

    fn add_noise(&self, out: &mut [f64], ctx: &mut NoiseCtx) {
        let Some(factor) = &self.noise_factor else {
            return;
        };
        let d = out.len();
        let z = match self.spec.freshness {
            Freshness::PerCall => rng::standard_normal_vec(ctx.rng(), d),
            Freshness::FrozenPerTrajectory => {
                let mut s: Stream =
                    rng::stream(self.seed, &[rng::tag::FROZEN, ctx.trajectory(), ctx.step()]);
                rng::standard_normal_vec(&mut s, d)
            }
        };
        let mut eta = vec![0.0; d];
        mat_vec(factor, &z, &mut eta);
        for (o, e) in out.iter_mut().zip(&eta) {
            *o += e;
        }
    }

    fn base_field(&self) -> &OracleField {
        self.shifted.as_ref().unwrap_or(&self.oracle)
    }
}

impl ScoreField for EstimatorField {
    fn dim(&self) -> usize {
        self.spec.dim()
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.oracle.schedule
    }

    fn provenance(&self) -> Provenance {
        Provenance::Perturbed
    }

    fn eval(&self, t: f64, x: &[f64], ctx: &mut NoiseCtx) -> Result<Vec<f64>> {
        let base = self.base_field().eval(t, x, ctx)?;
        let mut out = self.deterministic_part(base, x);
        self.add_noise(&mut out, ctx);
        Ok(out)
    }

    fn eval_batch(
        &self,
        t: f64,
        xs: &[Vec<f64>],
        ctxs: &mut [NoiseCtx],
    ) -> Result<Vec<Vec<f64>>> {
        let base = self.base_field().eval_batch(t, xs, ctxs)?;
        Ok(base
            .into_iter()
            .zip(xs)
            .zip(ctxs.iter_mut())
            .map(|((b, x), ctx)| {
                let mut out = self.deterministic_part(b, x);
                self.add_noise(&mut out, ctx);
                out
            })
            .collect())
    }

    fn has_log_density(&self) -> bool {
        self.noise_factor.is_none() && matches!(self.spec.bias, Bias::None | Bias::MeanShift { .. })
    }

    fn has_time_derivative(&self) -> bool {
        self.has_log_density()
    }

    fn log_density(&self, t: f64, x: &[f64]) -> Result<f64> {
        if !self.has_log_density() {
            return Err(Error::Capability("log-density"));
        }
        self.base_field().log_density(t, x)
    }

    fn dt_log_density(&self, t: f64, x: &[f64]) -> Result<f64> {
        if !self.has_time_derivative() {
            return Err(Error::Capability("time-derivative"));
        }
        self.base_field().dt_log_density(t, x)
    }

    fn is_deterministic(&self) -> bool {
        self.noise_factor.is_none()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const VP: NoiseSchedule = NoiseSchedule::VpLinear {
        beta_min: 0.1,
        beta_max: 20.0,
    };

    fn two_bumps(m: f64) -> GaussianMixture {
        GaussianMixture::new(&MixtureSpec {
            components: vec![
                ComponentSpec {
                    weight: 0.5,
                    mean: vec![m, 0.0],
                    cov: scaled_identity(2, 1.0),
                },
                ComponentSpec {
                    weight: 0.5,
                    mean: vec![-m, 0.0],
                    cov: scaled_identity(2, 1.0),
                },
            ],
        })
        .unwrap()
    }

    /// Random mixture with anisotropic, correlated covariances.
    fn random_mixture(rng: &mut ChaCha8Rng, d: usize, k: usize) -> GaussianMixture {
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let mut components: Vec<ComponentSpec> = raw
            .iter()
            .map(|w| {
                let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-0.8..0.8));
                let cov = &a * a.transpose() + DMatrix::identity(d, d) * 0.3;
                ComponentSpec {
                    weight: w / total,
                    mean: (0..d).map(|_| rng.random_range(-2.0..2.0)).collect(),
                    cov: (0..d).map(|i| (0..d).map(|j| cov[(i, j)]).collect()).collect(),
                }
            })
            .collect();
        // Force the weights to sum to one to the last bit.
        let head: f64 = components[..k - 1].iter().map(|c| c.weight).sum();
        components[k - 1].weight = 1.0 - head;
        GaussianMixture::new(&MixtureSpec { components }).unwrap()
    }

    #[test]
    fn score_vanishes_at_the_marginal_mode() {
        let mu = vec![1.5, -0.5];
        let g = GaussianMixture::isotropic(mu.clone(), 1.0).unwrap();
        let t = 0.3;
        let (alpha, _) = VP.alpha_sigma(t).unwrap();
        let x: Vec<f64> = mu.iter().map(|m| alpha * m).collect();
        let s = g.score(&VP, t, &x).unwrap();
        assert!(s.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn standard_normal_score_at_data_time() {
        let g = GaussianMixture::standard_normal(2);
        assert_eq!(g.score(&VP, 0.0, &[2.0, 0.0]).unwrap(), vec![-2.0, 0.0]);
    }

    #[test]
    fn symmetric_mixture_has_zero_score_at_midpoint() {
        let g = two_bumps(2.0);
        for &t in &[0.0, 0.2, 0.7, 1.0] {
            let s = g.score(&VP, t, &[0.0, 0.0]).unwrap();
            assert!(s.iter().all(|v| v.abs() < 1e-15));
        }
    }

    #[test]
    fn standard_normal_log_density_at_origin() {
        let g = GaussianMixture::standard_normal(2);
        let l = g.log_density(&VP, 0.0, &[0.0, 0.0]).unwrap();
        assert!((l + (2.0 * PI).ln()).abs() < 1e-14);
    }

    #[test]
    fn log_density_is_translation_invariant() {
        let v = [0.3, -1.2];
        let mu = [2.0, 5.0];
        let a = GaussianMixture::isotropic(mu.to_vec(), 0.7).unwrap();
        let b = GaussianMixture::isotropic(vec![0.0, 0.0], 0.7).unwrap();
        let la = a.log_density(&VP, 0.0, &[mu[0] + v[0], mu[1] + v[1]]).unwrap();
        let lb = b.log_density(&VP, 0.0, &v).unwrap();
        assert!((la - lb).abs() < 1e-14);
    }

    /// Direct summation of component densities, no log-sum-exp.
    fn naive_density(spec: &MixtureSpec, sched: &NoiseSchedule, t: f64, x: &[f64]) -> f64 {
        let (alpha, sigma) = sched.alpha_sigma(t).unwrap();
        let d = x.len();
        spec.components
            .iter()
            .map(|c| {
                let cov = DMatrix::from_fn(d, d, |i, j| {
                    alpha * alpha * c.cov[i][j] + if i == j { sigma * sigma } else { 0.0 }
                });
                let det = cov.determinant();
                let inv = cov.try_inverse().unwrap();
                let r = DVector::from_fn(d, |i, _| x[i] - alpha * c.mean[i]);
                let q = (r.transpose() * inv * &r)[(0, 0)];
                c.weight * (-0.5 * q).exp() / ((2.0 * PI).powi(d as i32) * det).sqrt()
            })
            .sum()
    }

    #[test]
    fn log_density_matches_naive_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let mix = random_mixture(&mut rng, 2, 3);
            let t = rng.random_range(0.0..1.0);
            let x: Vec<f64> = (0..2).map(|_| rng.random_range(-2.0..2.0)).collect();
            let naive = naive_density(&mix.spec(), &VP, t, &x).ln();
            let got = mix.log_density(&VP, t, &x).unwrap();
            assert!((naive - got).abs() <= 1e-10, "{naive} vs {got}");
        }
    }

    #[test]
    fn score_matches_finite_difference_of_log_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-5;
        for _ in 0..300 {
            let mix = random_mixture(&mut rng, 3, 2);
            let t = rng.random_range(0.0..1.0);
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let s = mix.score(&VP, t, &x).unwrap();
            let fd: Vec<f64> = (0..3)
                .map(|i| {
                    let (mut xp, mut xm) = (x.clone(), x.clone());
                    xp[i] += h;
                    xm[i] -= h;
                    (mix.log_density(&VP, t, &xp).unwrap() - mix.log_density(&VP, t, &xm).unwrap())
                        / (2.0 * h)
                })
                .collect();
            let num: f64 = s.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let den: f64 = s.iter().map(|a| a * a).sum::<f64>().sqrt().max(1.0);
            assert!(num / den <= 1e-6, "rel err {}", num / den);
        }
    }

    #[test]
    fn time_derivative_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = 1e-6;
        for sched in [VP, NoiseSchedule::FlowLinear] {
            for _ in 0..100 {
                let mix = random_mixture(&mut rng, 2, 2);
                let t = rng.random_range(0.05..0.95);
                let x: Vec<f64> = (0..2).map(|_| rng.random_range(-2.0..2.0)).collect();
                let fd = (mix.log_density(&sched, t + h, &x).unwrap()
                    - mix.log_density(&sched, t - h, &x).unwrap())
                    / (2.0 * h);
                let got = mix.dt_log_density(&sched, t, &x).unwrap();
                assert!((fd - got).abs() <= 1e-5 * (1.0 + got.abs()), "{fd} vs {got}");
            }
        }
    }

    #[test]
    fn lipschitz_constant_is_spectral_norm_of_precision() {
        let g = GaussianMixture::gaussian(vec![0.0, 0.0], vec![vec![2.0, 0.5], vec![0.5, 0.3]]).unwrap();
        for &t in &[0.0, 0.1, 0.5, 0.9] {
            let prec = g.marginal_precision(&VP, t).unwrap();
            let norm = prec.symmetric_eigenvalues().abs().max();
            let lip = g.score_lipschitz(&VP, t).unwrap();
            assert!((norm - lip).abs() <= 1e-9 * norm.max(1.0));
            // Score is linear with Jacobian -P.
            let x = [0.4, -0.9];
            let s = g.score(&VP, t, &x).unwrap();
            let (alpha, _) = VP.alpha_sigma(t).unwrap();
            let _ = alpha;
            let px = &prec * DVector::from_row_slice(&x);
            assert!((s[0] + px[0]).abs() < 1e-9 && (s[1] + px[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn invalid_mixtures_are_rejected() {
        let bad_weights = MixtureSpec {
            components: vec![ComponentSpec {
                weight: 0.9,
                mean: vec![0.0],
                cov: vec![vec![1.0]],
            }],
        };
        assert!(matches!(GaussianMixture::new(&bad_weights), Err(Error::Construction(_))));
        let not_spd = MixtureSpec {
            components: vec![ComponentSpec {
                weight: 1.0,
                mean: vec![0.0, 0.0],
                cov: vec![vec![1.0, 2.0], vec![2.0, 1.0]],
            }],
        };
        assert!(matches!(GaussianMixture::new(&not_spd), Err(Error::Construction(_))));
    }

    fn probes(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<(f64, Vec<f64>)> {
        (0..n)
            .map(|_| {
                (
                    rng.random_range(0.0..1.0),
                    (0..d).map(|_| rng.random_range(-3.0..3.0)).collect(),
                )
            })
            .collect()
    }

    #[test]
    fn unbiased_noiseless_estimator_equals_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let base = Arc::new(random_mixture(&mut rng, 2, 2));
        let est = make_estimator(&EstimatorSpec::exact(base.clone()), VP, 0).unwrap();
        let mut ctx = NoiseCtx::detached();
        for (t, x) in probes(&mut rng, 1000, 2) {
            let a = est.eval(t, &x, &mut ctx).unwrap();
            let b = base.score(&VP, t, &x).unwrap();
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn constant_bias_is_added_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let base = Arc::new(random_mixture(&mut rng, 2, 2));
        let b = vec![0.25, -0.75];
        let spec = EstimatorSpec::exact(base.clone()).with_bias(Bias::Constant { b: b.clone() });
        let est = make_estimator(&spec, VP, 0).unwrap();
        let mut ctx = NoiseCtx::detached();
        for (t, x) in probes(&mut rng, 1000, 2) {
            let a = est.eval(t, &x, &mut ctx).unwrap();
            let s = base.score(&VP, t, &x).unwrap();
            for i in 0..2 {
                assert_eq!(a[i], s[i] + b[i]);
            }
            assert_eq!(est.bias_at(t, &x).unwrap(), b);
        }
    }

    #[test]
    fn mean_shift_is_the_score_of_the_translated_law() {
        let base = Arc::new(two_bumps(1.0));
        let delta = vec![0.5, -0.2];
        let spec = EstimatorSpec::exact(base.clone()).with_bias(Bias::MeanShift { delta: delta.clone() });
        let est = make_estimator(&spec, VP, 0).unwrap();
        let shifted = base.shifted(&delta).unwrap();
        let mut ctx = NoiseCtx::detached();
        let x = [0.3, 0.1];
        assert_eq!(est.eval(0.4, &x, &mut ctx).unwrap(), shifted.score(&VP, 0.4, &x).unwrap());
        assert!(est.has_log_density());
    }

    #[test]
    fn per_call_noise_has_the_declared_variance() {
        let base = Arc::new(GaussianMixture::standard_normal(2));
        let var = 0.49;
        let spec = EstimatorSpec::exact(base.clone()).with_noise(
            NoiseSpec::Gaussian {
                cov: scaled_identity(2, var),
            },
            Freshness::PerCall,
        );
        let est = make_estimator(&spec, VP, 4).unwrap();
        let mut ctx = NoiseCtx::new(17, 0);
        let (t, x) = (0.5, [0.2, -0.4]);
        let s = base.score(&VP, t, &x).unwrap();
        let n = 100_000;
        let mut sum = [0.0; 2];
        let mut sum_sq = [0.0; 2];
        for _ in 0..n {
            let v = est.eval(t, &x, &mut ctx).unwrap();
            for i in 0..2 {
                let e = v[i] - s[i];
                sum[i] += e;
                sum_sq[i] += e * e;
            }
        }
        // Standard error of a Gaussian sample variance is var * sqrt(2 / (n - 1)).
        let se = var * (2.0 / (n as f64 - 1.0)).sqrt();
        for i in 0..2 {
            let mean = sum[i] / n as f64;
            let sample_var = (sum_sq[i] - n as f64 * mean * mean) / (n as f64 - 1.0);
            assert!((sample_var - var).abs() <= 3.0 * se, "{sample_var}");
        }
    }

    #[test]
    fn frozen_noise_repeats_per_trajectory_and_step() {
        let base = Arc::new(GaussianMixture::standard_normal(2));
        let spec = EstimatorSpec::exact(base).with_noise(
            NoiseSpec::Gaussian {
                cov: scaled_identity(2, 1.0),
            },
            Freshness::FrozenPerTrajectory,
        );
        let est = make_estimator(&spec, VP, 4).unwrap();
        let mut a = NoiseCtx::new(1, 3);
        let mut b = NoiseCtx::new(99, 3);
        a.set_step(5);
        b.set_step(5);
        let x = [0.1, 0.2];
        assert_eq!(est.eval(0.5, &x, &mut a).unwrap(), est.eval(0.5, &x, &mut b).unwrap());
        b.set_step(6);
        assert_ne!(est.eval(0.5, &x, &mut a).unwrap(), est.eval(0.5, &x, &mut b).unwrap());
    }

    #[test]
    fn bad_noise_covariance_fails_construction() {
        let base = Arc::new(GaussianMixture::standard_normal(2));
        let spec = EstimatorSpec::exact(base).with_noise(
            NoiseSpec::Gaussian {
                cov: vec![vec![1.0, 3.0], vec![3.0, 1.0]],
            },
            Freshness::PerCall,
        );
        assert!(matches!(make_estimator(&spec, VP, 0), Err(Error::Construction(_))));
    }
}
