//! Composition operators over score fields.
//!
//! * convex: `sum_i w_i s_i` with simplex weights,
//! * guidance: `s_u + sum_i w_i (s_i - s_u)` anchored on an unconditional member,
//! * OR: convex weights from `softmax(T log p_i + l)`, recomputed at every `(t, x)`,
//! * AND: convex weights that make every member's log-density change at the same
//!   rate along the composed probability-flow drift.
//!
//! Convex and guidance combinations are affine with coefficients summing to one,
//! so they commute with the (affine) parameterization maps. [`ComposedField`]
//! therefore combines members in their native kind when they all share one and
//! falls back to score space otherwise.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::field::{self, FieldRef, NoiseCtx, Provenance, ScoreField};
use crate::param::{convert_value, PredictionKind};
use crate::schedule::NoiseSchedule;

pub const WEIGHT_SUM_TOL: f64 = 1e-12;
/// Below this the AND system is treated as degenerate.
pub const AND_DEGENERACY_TOL: f64 = 1e-10;

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Operator {
    Convex {
        weights: Vec<f64>,
    },
    /// The first member is the unconditional field; `guidance` has one entry
    /// per remaining member.
    Cfg {
        guidance: Vec<f64>,
    },
    And,
    Or {
        #[serde(default = "one")]
        temperature: f64,
        #[serde(default)]
        offset: f64,
    },
}

impl Operator {
    pub fn name(&self) -> &'static str {
        match self {
            Operator::Convex { .. } => "convex",
            Operator::Cfg { .. } => "cfg",
            Operator::And => "and",
            Operator::Or { .. } => "or",
        }
    }
}

/// Check that `weights` lie on the probability simplex.
pub fn check_simplex(weights: &[f64]) -> Result<()> {
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::Spec(format!("weights must be nonnegative, got {weights:?}")));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(Error::Spec(format!("weights sum to {sum}, expected 1")));
    }
    Ok(())
}

fn check_members(fields: &[FieldRef]) -> Result<()> {
    if fields.len() < 2 {
        return Err(Error::Spec(format!(
            "composition needs at least two members, got {}",
            fields.len()
        )));
    }
    let d = fields[0].dim();
    let sched = fields[0].schedule();
    for f in &fields[1..] {
        check_dim(d, f.dim())?;
        if f.schedule() != sched {
            return Err(Error::Spec("members must share one noise schedule".into()));
        }
    }
    Ok(())
}

/// `sum_i c_i v_i` accumulated in member order.
fn combine(coeffs: &[f64], values: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; values[0].len()];
    for (c, v) in coeffs.iter().zip(values) {
        for (o, vi) in out.iter_mut().zip(v) {
            *o += c * vi;
        }
    }
    out
}

/// Evaluate member scores, each with its own child noise context.
fn member_scores(fields: &[FieldRef], t: f64, x: &[f64], ctx: &mut NoiseCtx) -> Result<Vec<Vec<f64>>> {
    fields
        .iter()
        .enumerate()
        .map(|(i, f)| field::score(f.as_ref(), t, x, ctx.child(i)))
        .collect()
}

pub fn convex_compose(
    fields: &[FieldRef],
    weights: &[f64],
    t: f64,
    x: &[f64],
    ctx: &mut NoiseCtx,
) -> Result<Vec<f64>> {
    check_members(fields)?;
    check_dim(fields.len(), weights.len())?;
    check_simplex(weights)?;
    Ok(combine(weights, &member_scores(fields, t, x, ctx)?))
}

/// Affine coefficients of the guidance rule over `[uncond, cond_1, ..]`.
fn cfg_coefficients(guidance: &[f64]) -> Vec<f64> {
    let mut c = Vec::with_capacity(guidance.len() + 1);
    c.push(1.0 - guidance.iter().sum::<f64>());
    c.extend_from_slice(guidance);
    c
}

pub fn cfg_compose(
    uncond: &FieldRef,
    cond: &[FieldRef],
    guidance: &[f64],
    t: f64,
    x: &[f64],
    ctx: &mut NoiseCtx,
) -> Result<Vec<f64>> {
    check_dim(cond.len(), guidance.len())?;
    let mut all = Vec::with_capacity(cond.len() + 1);
    all.push(uncond.clone());
    all.extend(cond.iter().cloned());
    if all.len() == 1 {
        return field::score(uncond.as_ref(), t, x, ctx);
    }
    check_members(&all)?;
    let scores = member_scores(&all, t, x, ctx)?;
    // Written as s_u + sum w_i (s_i - s_u) so that zero guidance returns s_u exactly.
    let mut out = scores[0].clone();
    for (w, s) in guidance.iter().zip(&scores[1..]) {
        for ((o, si), su) in out.iter_mut().zip(s).zip(&scores[0]) {
            *o += w * (si - su);
        }
    }
    Ok(out)
}

fn require_log_density(fields: &[FieldRef]) -> Result<()> {
    if fields.iter().all(|f| f.has_log_density()) {
        Ok(())
    } else {
        Err(Error::Capability("log-density"))
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// OR weights `softmax(T log p_i(t, x) + l)`.
///
/// A scalar offset shifts every logit equally and so leaves the weights unchanged.
pub fn or_weights(fields: &[FieldRef], temperature: f64, offset: f64, t: f64, x: &[f64]) -> Result<Vec<f64>> {
    if !(temperature >= 0.0) || !temperature.is_finite() {
        return Err(Error::Domain {
            what: "temperature",
            value: temperature,
            lo: 0.0,
            hi: f64::INFINITY,
        });
    }
    require_log_density(fields)?;
    if temperature == 0.0 {
        return Ok(vec![1.0 / fields.len() as f64; fields.len()]);
    }
    let logits = fields
        .iter()
        .map(|f| Ok(temperature * f.log_density(t, x)? + offset))
        .collect::<Result<Vec<_>>>()?;
    Ok(softmax(&logits))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AndWeights {
    pub weights: Vec<f64>,
    /// The linear system had no usable solution and uniform weights were returned.
    pub degenerate: bool,
    /// The unconstrained solution left the simplex and was projected back.
    pub clamped: bool,
}

/// Pieces of `D_i(w) = a_i - k sum_j w_j <s_i, s_j>` with
/// `a_i = dt log p_i + f <s_i, x>` and `k = g^2 / 2`.
#[derive(Clone, Debug)]
pub struct AndSystem {
    pub a: Vec<f64>,
    pub gram: DMatrix<f64>,
    pub k: f64,
}

impl AndSystem {
    pub fn build(fields: &[FieldRef], t: f64, x: &[f64], ctx: &mut NoiseCtx) -> Result<Self> {
        check_members(fields)?;
        require_log_density(fields)?;
        let sched = fields[0].schedule();
        if !sched.is_variance_preserving() {
            return Err(Error::Spec(
                "AND composition is defined for variance-preserving diffusion members only".into(),
            ));
        }
        let f = sched.drift_coefficient(t);
        let k = 0.5 * sched.diffusion_sq(t);
        let scores = member_scores(fields, t, x, ctx)?;
        let n = fields.len();
        let mut a = Vec::with_capacity(n);
        for (fi, s) in fields.iter().zip(&scores) {
            let sx: f64 = s.iter().zip(x).map(|(u, v)| u * v).sum();
            a.push(field::dt_log_density_or_fd(fi.as_ref(), t, x)? + f * sx);
        }
        let gram = DMatrix::from_fn(n, n, |i, j| {
            scores[i].iter().zip(&scores[j]).map(|(u, v)| u * v).sum()
        });
        Ok(AndSystem { a, gram, k })
    }

    /// Rate of change of member `i`'s log-density along the drift composed with `w`.
    pub fn rate(&self, i: usize, w: &[f64]) -> f64 {
        let gw: f64 = (0..w.len()).map(|j| self.gram[(i, j)] * w[j]).sum();
        self.a[i] - self.k * gw
    }

    pub fn solve(&self) -> AndWeights {
        let n = self.a.len();
        let uniform = AndWeights {
            weights: vec![1.0 / n as f64; n],
            degenerate: true,
            clamped: false,
        };
        if n == 2 {
            // D_1 - D_2 = (a_1 - a_2) - k (<ds, s_2> + w |ds|^2), ds = s_1 - s_2.
            let g = &self.gram;
            let ds_sq = g[(0, 0)] - 2.0 * g[(0, 1)] + g[(1, 1)];
            let ds_s2 = g[(0, 1)] - g[(1, 1)];
            let denom = self.k * ds_sq;
            if denom.abs() < AND_DEGENERACY_TOL {
                return uniform;
            }
            let w = (self.a[0] - self.a[1] - self.k * ds_s2) / denom;
            let clamped = !(0.0..=1.0).contains(&w);
            let w = w.clamp(0.0, 1.0);
            return AndWeights {
                weights: vec![w, 1.0 - w],
                degenerate: false,
                clamped,
            };
        }
        // Least squares over all pairwise differences, with sum(w) = 1 enforced
        // through the KKT system, then projected onto the simplex.
        let pairs: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .collect();
        let m = DMatrix::from_fn(pairs.len(), n, |r, c| {
            let (i, j) = pairs[r];
            self.k * (self.gram[(i, c)] - self.gram[(j, c)])
        });
        let rhs = DVector::from_iterator(pairs.len(), pairs.iter().map(|&(i, j)| self.a[i] - self.a[j]));
        let mtm = m.transpose() * &m;
        if mtm.abs().max() < AND_DEGENERACY_TOL {
            return uniform;
        }
        let mut kkt = DMatrix::zeros(n + 1, n + 1);
        kkt.view_mut((0, 0), (n, n)).copy_from(&(&mtm * 2.0));
        for i in 0..n {
            kkt[(i, n)] = 1.0;
            kkt[(n, i)] = 1.0;
        }
        let mut b = DVector::zeros(n + 1);
        b.rows_mut(0, n).copy_from(&(m.transpose() * rhs * 2.0));
        b[n] = 1.0;
        let Ok(sol) = kkt.svd(true, true).solve(&b, 1e-12) else {
            return uniform;
        };
        let raw: Vec<f64> = sol.rows(0, n).iter().copied().collect();
        let projected = project_to_simplex(&raw);
        let clamped = raw.iter().zip(&projected).any(|(a, b)| (a - b).abs() > 1e-12);
        AndWeights {
            weights: projected,
            degenerate: false,
            clamped,
        }
    }
}

pub fn and_weights(fields: &[FieldRef], t: f64, x: &[f64], ctx: &mut NoiseCtx) -> Result<AndWeights> {
    Ok(AndSystem::build(fields, t, x, ctx)?.solve())
}

/// Euclidean projection onto the probability simplex.
pub fn project_to_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (i, ui) in u.iter().enumerate() {
        cumulative += ui;
        let candidate = (cumulative - 1.0) / (i + 1) as f64;
        if ui - candidate > 0.0 {
            theta = candidate;
        }
    }
    v.iter().map(|vi| (vi - theta).max(0.0)).collect()
}

/// Composition operator plus its ordered members.
#[derive(Clone)]
pub struct CompositionSpec {
    pub operator: Operator,
    pub members: Vec<FieldRef>,
}

/// A composition evaluated as a field in its own right.
#[derive(Clone)]
pub struct ComposedField {
    operator: Operator,
    members: Vec<FieldRef>,
    kind: PredictionKind,
}

impl std::fmt::Debug for ComposedField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ComposedField")
            .field("operator", &self.operator)
            .field("members", &self.members.len())
            .field("kind", &self.kind)
            .finish()
    }
}

impl ComposedField {
    pub fn new(spec: CompositionSpec) -> Result<Self> {
        let CompositionSpec { operator, members } = spec;
        check_members(&members)?;
        let n = members.len();
        match &operator {
            Operator::Convex { weights } => {
                check_dim(n, weights.len())?;
                check_simplex(weights)?;
            }
            Operator::Cfg { guidance } => {
                check_dim(n - 1, guidance.len())?;
                if guidance.iter().any(|g| !g.is_finite()) {
                    return Err(Error::Spec("guidance weights must be finite".into()));
                }
            }
            Operator::Or { temperature, offset } => {
                if !(*temperature >= 0.0) || !temperature.is_finite() || !offset.is_finite() {
                    return Err(Error::Spec(format!(
                        "OR needs a finite temperature >= 0, got {temperature}"
                    )));
                }
                require_log_density(&members)?;
            }
            Operator::And => {
                require_log_density(&members)?;
                if !members[0].schedule().is_variance_preserving() {
                    return Err(Error::Spec(
                        "AND composition is defined for variance-preserving diffusion members only".into(),
                    ));
                }
            }
        }
        let first = members[0].kind();
        let kind = if members.iter().all(|m| m.kind() == first) {
            first
        } else {
            PredictionKind::Score
        };
        Ok(ComposedField { operator, members, kind })
    }

    pub fn convex(members: Vec<FieldRef>, weights: Vec<f64>) -> Result<Self> {
        ComposedField::new(CompositionSpec {
            operator: Operator::Convex { weights },
            members,
        })
    }

    pub fn operator(&self) -> &Operator {
        &self.operator
    }

    pub fn members(&self) -> &[FieldRef] {
        &self.members
    }

    /// Affine coefficients over the members at `(t, x)`, plus the AND report when relevant.
    pub fn coefficients(&self, t: f64, x: &[f64], ctx: &mut NoiseCtx) -> Result<(Vec<f64>, Option<AndWeights>)> {
        Ok(match &self.operator {
            Operator::Convex { weights } => (weights.clone(), None),
            Operator::Cfg { guidance } => (cfg_coefficients(guidance), None),
            Operator::Or { temperature, offset } => {
                (or_weights(&self.members, *temperature, *offset, t, x)?, None)
            }
            Operator::And => {
                let w = and_weights(&self.members, t, x, ctx)?;
                (w.weights.clone(), Some(w))
            }
        })
    }

    fn member_values(&self, t: f64, x: &[f64], ctx: &mut NoiseCtx) -> Result<Vec<Vec<f64>>> {
        self.members
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let native = m.eval(t, x, ctx.child(i))?;
                convert_value(m.kind(), self.kind, &native, t, x, m.schedule())
            })
            .collect()
    }

    fn combine_values(&self, coeffs: &[f64], values: &[Vec<f64>]) -> Vec<f64> {
        match &self.operator {
            Operator::Cfg { guidance } => {
                let mut out = values[0].clone();
                for (w, v) in guidance.iter().zip(&values[1..]) {
                    for ((o, vi), u) in out.iter_mut().zip(v).zip(&values[0]) {
                        *o += w * (vi - u);
                    }
                }
                out
            }
            _ => combine(coeffs, values),
        }
    }
}

impl ScoreField for ComposedField {
    fn dim(&self) -> usize {
        self.members[0].dim()
    }

    fn schedule(&self) -> &NoiseSchedule {
        self.members[0].schedule()
    }

    fn kind(&self) -> PredictionKind {
        self.kind
    }

    fn provenance(&self) -> Provenance {
        Provenance::Composed
    }

    fn eval(&self, t: f64, x: &[f64], ctx: &mut NoiseCtx) -> Result<Vec<f64>> {
        check_dim(self.dim(), x.len())?;
        let (coeffs, _) = self.coefficients(t, x, ctx)?;
        let values = self.member_values(t, x, ctx)?;
        Ok(self.combine_values(&coeffs, &values))
    }

    fn eval_batch(&self, t: f64, xs: &[Vec<f64>], ctxs: &mut [NoiseCtx]) -> Result<Vec<Vec<f64>>> {
        // Weights depending on (t, x) are evaluated point by point.
        if matches!(self.operator, Operator::And | Operator::Or { .. }) {
            return xs
                .iter()
                .zip(ctxs.iter_mut())
                .map(|(x, ctx)| self.eval(t, x, ctx))
                .collect();
        }
        let (coeffs, _) = self.coefficients(t, &[], &mut NoiseCtx::detached())?;
        let mut per_member = Vec::with_capacity(self.members.len());
        for (i, m) in self.members.iter().enumerate() {
            let mut sub: Vec<NoiseCtx> = ctxs.iter_mut().map(|c| c.take_child(i)).collect();
            let out = m.eval_batch(t, xs, &mut sub);
            for (c, s) in ctxs.iter_mut().zip(sub) {
                c.put_child(i, s);
            }
            let native = out?;
            let converted = if m.kind() == self.kind {
                native
            } else {
                native
                    .iter()
                    .zip(xs)
                    .map(|(v, x)| convert_value(m.kind(), self.kind, v, t, x, m.schedule()))
                    .collect::<Result<Vec<_>>>()?
            };
            per_member.push(converted);
        }
        Ok((0..xs.len())
            .map(|p| {
                let values: Vec<Vec<f64>> = per_member.iter().map(|m| m[p].clone()).collect();
                self.combine_values(&coeffs, &values)
            })
            .collect())
    }

    fn is_deterministic(&self) -> bool {
        self.members.iter().all(|m| m.is_deterministic())
    }
}
