//! Conversions between score, noise (`eps`), clean-sample (`x0`) and velocity predictions.
//!
//! All four are affine images of one another at fixed `(t, x)`:
//!
//! ```text
//! s   = -eps / sigma
//! eps = (x - alpha x0) / sigma
//! eps = alpha v + c(t) x          c = sigma (variance preserving), c = 1 (flow)
//! ```
//!
//! The velocity is normalized so that `dx/dt = W(t) v` along the probability
//! flow; on variance-preserving schedules this is the usual
//! `v = alpha eps - sigma x0`, on the flow interpolant it is `eps - x0`.
//! Conversions that would divide by a vanishing `alpha` or `sigma` are refused.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{FieldRef, NoiseCtx, Provenance, ScoreField};
use crate::schedule::NoiseSchedule;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictionKind {
    Score,
    Epsilon,
    Sample,
    Velocity,
}

impl PredictionKind {
    pub const ALL: [PredictionKind; 4] = [
        PredictionKind::Score,
        PredictionKind::Epsilon,
        PredictionKind::Sample,
        PredictionKind::Velocity,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            PredictionKind::Score => "score",
            PredictionKind::Epsilon => "epsilon",
            PredictionKind::Sample => "sample",
            PredictionKind::Velocity => "velocity",
        }
    }
}

impl fmt::Display for PredictionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A kind-tagged prediction together with the point it was made at.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub kind: PredictionKind,
    pub value: Vec<f64>,
    pub t: f64,
    pub x: Vec<f64>,
    pub schedule: NoiseSchedule,
}

impl Prediction {
    pub fn convert(&self, target: PredictionKind) -> Result<Prediction> {
        Ok(Prediction {
            kind: target,
            value: convert_value(self.kind, target, &self.value, self.t, &self.x, &self.schedule)?,
            t: self.t,
            x: self.x.clone(),
            schedule: self.schedule,
        })
    }
}

pub fn convert(p: &Prediction, target: PredictionKind) -> Result<Prediction> {
    p.convert(target)
}

/// Convert a raw prediction vector between parameterizations.
pub fn convert_value(
    from: PredictionKind,
    to: PredictionKind,
    value: &[f64],
    t: f64,
    x: &[f64],
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    if from == to {
        return Ok(value.to_vec());
    }
    if value.len() != x.len() {
        return Err(Error::Dimension {
            expected: x.len(),
            got: value.len(),
        });
    }
    let (alpha, sigma) = schedule.alpha_sigma(t)?;
    let singular = || Error::SingularTime {
            from: from.name(),
            to: to.name(),
            t,
        alpha,
        sigma,
    };
    let c = schedule.velocity_state_coefficient(t);

    let eps: Vec<f64> = match from {
        PredictionKind::Epsilon => value.to_vec(),
        PredictionKind::Score => value.iter().map(|s| -sigma * s).collect(),
        PredictionKind::Sample => {
            if sigma <= 0.0 {
                return Err(singular());
            }
            value
                .iter()
                .zip(x)
                .map(|(x0, xi)| (xi - alpha * x0) / sigma)
                .collect()
        }
        PredictionKind::Velocity => value
            .iter()
            .zip(x)
            .map(|(v, xi)| alpha * v + c * xi)
            .collect(),
    };

    match to {
        PredictionKind::Epsilon => Ok(eps),
        PredictionKind::Score => {
            if sigma <= 0.0 {
                return Err(singular());
            }
            Ok(eps.iter().map(|e| -e / sigma).collect())
        }
        PredictionKind::Sample => {
            if alpha <= 0.0 {
                return Err(singular());
            }
            Ok(eps
                .iter()
                .zip(x)
                .map(|(e, xi)| (xi - sigma * e) / alpha)
                .collect())
        }
        PredictionKind::Velocity => {
            if alpha <= 0.0 {
                return Err(singular());
            }
            Ok(eps.iter().zip(x).map(|(e, xi)| (e - c * xi) / alpha).collect())
        }
    }
}

/// Re-expresses another field's output in a different parameterization.
pub struct ConvertedField {
    inner: FieldRef,
    target: PredictionKind,
}

impl ConvertedField {
    pub fn new(inner: FieldRef, target: PredictionKind) -> Self {
        ConvertedField { inner, target }
    }

    pub fn inner(&self) -> &FieldRef {
        &self.inner
    }
}

impl ScoreField for ConvertedField {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn schedule(&self) -> &NoiseSchedule {
        self.inner.schedule()
    }

    fn kind(&self) -> PredictionKind {
        self.target
    }

    fn provenance(&self) -> Provenance {
        self.inner.provenance()
    }

    fn eval(&self, t: f64, x: &[f64], ctx: &mut NoiseCtx) -> Result<Vec<f64>> {
        let native = self.inner.eval(t, x, ctx)?;
        convert_value(self.inner.kind(), self.target, &native, t, x, self.inner.schedule())
    }

    fn eval_batch(
        &self,
        t: f64,
        xs: &[Vec<f64>],
        ctxs: &mut [NoiseCtx],
    ) -> Result<Vec<Vec<f64>>> {
        crate::field::eval_batch_as(self.inner.as_ref(), self.target, t, xs, ctxs)
    }

    fn has_log_density(&self) -> bool {
        self.inner.has_log_density()
    }

    fn has_time_derivative(&self) -> bool {
        self.inner.has_time_derivative()
    }

    fn log_density(&self, t: f64, x: &[f64]) -> Result<f64> {
        self.inner.log_density(t, x)
    }

    fn dt_log_density(&self, t: f64, x: &[f64]) -> Result<f64> {
        self.inner.dt_log_density(t, x)
    }

    fn is_deterministic(&self) -> bool {
        self.inner.is_deterministic()
    }
}

/// Wrap `field` so that it evaluates in `kind`.
pub fn as_kind(field: FieldRef, kind: PredictionKind) -> FieldRef {
    if field.kind() == kind {
        return field;
    }
    std::sync::Arc::new(ConvertedField::new(field, kind))
}

pub fn as_score_field(field: FieldRef) -> FieldRef {
    as_kind(field, PredictionKind::Score)
}

type FieldFn = dyn Fn(f64, &[f64]) -> Vec<f64> + Send + Sync;

/// A deterministic field backed by a closure, in any parameterization.
pub struct FnField {
    dim: usize,
    schedule: NoiseSchedule,
    kind: PredictionKind,
    f: Box<FieldFn>,
}

impl FnField {
    pub fn new(
        dim: usize,
        schedule: NoiseSchedule,
        kind: PredictionKind,
        f: impl Fn(f64, &[f64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        FnField {
            dim,
            schedule,
            kind,
            f: Box::new(f),
        }
    }
}

impl ScoreField for FnField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn kind(&self) -> PredictionKind {
        self.kind
    }

    fn provenance(&self) -> Provenance {
        Provenance::Perturbed
    }

    fn eval(&self, t: f64, x: &[f64], _ctx: &mut NoiseCtx) -> Result<Vec<f64>> {
        crate::error::check_dim(self.dim, x.len())?;
        Ok((self.f)(t, x))
    }
}
