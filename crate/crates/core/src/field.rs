//! The evaluatable field abstraction shared by oracles, estimators and compositions.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::{convert_value, PredictionKind};
use crate::rng::{self, Stream};
use crate::schedule::NoiseSchedule;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Oracle,
    Perturbed,
    Composed,
}

/// Per-trajectory randomness handed to field evaluations.
///
/// Fields with per-call noise draw from [`NoiseCtx::rng`]; fields with frozen
/// noise key their draws on `(field seed, trajectory, step)` instead. There is
/// no shared mutable state: every worker owns its contexts.
///
/// Composite fields hand each member its own [`NoiseCtx::child`], so a
/// member's draws do not depend on which other members are evaluated.
#[derive(Clone, Debug)]
pub struct NoiseCtx {
    seed: u64,
    trajectory: u64,
    step: u64,
    rng: Stream,
    children: Vec<NoiseCtx>,
}

impl NoiseCtx {
    pub fn new(seed: u64, trajectory: u64) -> Self {
        NoiseCtx {
            seed,
            trajectory,
            step: 0,
            rng: rng::stream(seed, &[rng::tag::FIELD, trajectory]),
            children: Vec::new(),
        }
    }

    /// Persistent sub-context for member `index` of a composite field.
    pub fn child(&mut self, index: usize) -> &mut NoiseCtx {
        while self.children.len() <= index {
            let k = self.children.len() as u64;
            let seed = rng::derive_seed(self.seed, &[rng::tag::FIELD, k]);
            self.children.push(NoiseCtx::new(seed, self.trajectory));
        }
        let step = self.step;
        let c = &mut self.children[index];
        c.step = step;
        c
    }

    /// Context for evaluations outside any sampling loop.
    pub fn detached() -> Self {
        NoiseCtx::new(0, 0)
    }

    /// Move member `index`'s sub-context out, for batched evaluation.
    /// Must be returned with [`NoiseCtx::put_child`].
    pub fn take_child(&mut self, index: usize) -> NoiseCtx {
        let c = self.child(index);
        let placeholder = NoiseCtx {
            seed: c.seed,
            trajectory: c.trajectory,
            step: c.step,
            rng: rng::stream(0, &[]),
            children: Vec::new(),
        };
        std::mem::replace(c, placeholder)
    }

    pub fn put_child(&mut self, index: usize, child: NoiseCtx) {
        self.children[index] = child;
    }

    pub fn trajectory(&self) -> u64 {
        self.trajectory
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn rng(&mut self) -> &mut Stream {
        &mut self.rng
    }
}

pub trait ScoreField: Send + Sync {
    fn dim(&self) -> usize;

    fn schedule(&self) -> &NoiseSchedule;

    /// Parameterization of the values returned by [`ScoreField::eval`].
    fn kind(&self) -> PredictionKind {
        PredictionKind::Score
    }

    fn provenance(&self) -> Provenance;

    /// Evaluate in the native parameterization.
    fn eval(&self, t: f64, x: &[f64], ctx: &mut NoiseCtx) -> Result<Vec<f64>>;

    fn eval_batch(
        &self,
        t: f64,
        xs: &[Vec<f64>],
        ctxs: &mut [NoiseCtx],
    ) -> Result<Vec<Vec<f64>>> {
        xs.iter()
            .zip(ctxs.iter_mut())
            .map(|(x, ctx)| self.eval(t, x, ctx))
            .collect()
    }

    fn has_log_density(&self) -> bool {
        false
    }

    fn has_time_derivative(&self) -> bool {
        false
    }

    fn log_density(&self, _t: f64, _x: &[f64]) -> Result<f64> {
        Err(Error::Capability("log-density"))
    }

    /// Partial time derivative of the log-density at fixed `x`.
    fn dt_log_density(&self, _t: f64, _x: &[f64]) -> Result<f64> {
        Err(Error::Capability("time-derivative"))
    }

    /// `true` when repeated evaluations at the same `(t, x)` agree.
    fn is_deterministic(&self) -> bool {
        true
    }
}

pub type FieldRef = Arc<dyn ScoreField>;

/// Evaluate `field` and convert the result to `kind`.
pub fn eval_as(
    field: &dyn ScoreField,
    kind: PredictionKind,
    t: f64,
    x: &[f64],
    ctx: &mut NoiseCtx,
) -> Result<Vec<f64>> {
    let native = field.eval(t, x, ctx)?;
    convert_value(field.kind(), kind, &native, t, x, field.schedule())
}

pub fn score(field: &dyn ScoreField, t: f64, x: &[f64], ctx: &mut NoiseCtx) -> Result<Vec<f64>> {
    eval_as(field, PredictionKind::Score, t, x, ctx)
}

pub fn eval_batch_as(
    field: &dyn ScoreField,
    kind: PredictionKind,
    t: f64,
    xs: &[Vec<f64>],
    ctxs: &mut [NoiseCtx],
) -> Result<Vec<Vec<f64>>> {
    let native = field.eval_batch(t, xs, ctxs)?;
    if field.kind() == kind {
        return Ok(native);
    }
    native
        .iter()
        .zip(xs)
        .map(|(v, x)| convert_value(field.kind(), kind, v, t, x, field.schedule()))
        .collect()
}

/// Partial time derivative of the log-density, analytic when available and a
/// central difference with step `1e-5` otherwise.
pub fn dt_log_density_or_fd(field: &dyn ScoreField, t: f64, x: &[f64]) -> Result<f64> {
    if field.has_time_derivative() {
        return field.dt_log_density(t, x);
    }
    const H: f64 = 1e-5;
    let (lo, hi) = ((t - H).max(0.0), (t + H).min(1.0));
    Ok((field.log_density(hi, x)? - field.log_density(lo, x)?) / (hi - lo))
}
