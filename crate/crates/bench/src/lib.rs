//! Shared fixtures for the benchmarks.

use std::sync::Arc;

use gpc_core::compose::{ComposedField, CompositionSpec, Operator};
use gpc_core::field::FieldRef;
use gpc_core::oracle::{make_estimator, Bias, EstimatorSpec, GaussianMixture, MixtureSpec, OracleField};
use gpc_core::schedule::NoiseSchedule;

/// A `k`-component isotropic mixture in `d` dimensions with means on a ring.
pub fn ring_mixture(k: usize, d: usize) -> Arc<GaussianMixture> {
    let components = (0..k)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / k as f64;
            let mut mean = vec![0.0; d];
            mean[0] = 2.0 * a.cos();
            if d > 1 {
                mean[1] = 2.0 * a.sin();
            }
            gpc_core::oracle::ComponentSpec {
                weight: 1.0 / k as f64,
                mean,
                cov: (0..d)
                    .map(|r| (0..d).map(|c| if r == c { 0.1 } else { 0.0 }).collect())
                    .collect(),
            }
        })
        .collect();
    Arc::new(GaussianMixture::new(&MixtureSpec { components }).expect("valid ring mixture"))
}

pub fn oracle(k: usize, d: usize) -> FieldRef {
    Arc::new(OracleField::new(ring_mixture(k, d), NoiseSchedule::vp_linear()))
}

/// Two mean-shifted copies of the same mixture composed with `operator`.
pub fn shifted_pair(k: usize, d: usize, operator: Operator) -> ComposedField {
    let base = ring_mixture(k, d);
    let member = |s: f64| -> FieldRef {
        let mut delta = vec![0.0; d];
        delta[0] = s;
        let spec = EstimatorSpec::exact(base.clone()).with_bias(Bias::MeanShift { delta });
        Arc::new(make_estimator(&spec, NoiseSchedule::vp_linear(), 0).expect("valid estimator"))
    };
    ComposedField::new(CompositionSpec {
        operator,
        members: vec![member(0.5), member(-0.5)],
    })
    .expect("valid composition")
}
