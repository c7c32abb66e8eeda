//! TOML experiment configuration.
//!
//! Mixtures and estimators are declared under names; the composition, the
//! bench task and the sweep refer to them by name. [`ExperimentConfig::resolve`]
//! turns the names into live fields and reports unresolved references with the
//! path of the offending field.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bench::{BenchTask, Metric};
use crate::compose::{ComposedField, CompositionSpec, Operator};
use crate::error::{Error, Result};
use crate::field::FieldRef;
use crate::oracle::{
    make_estimator, Bias, ComponentSpec, EstimatorSpec, Freshness, GaussianMixture, MixtureSpec, NoiseSpec,
};
use crate::rng;
use crate::schedule::{NoiseSchedule, Solver};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub output_dir: String,
    pub schedule: NoiseSchedule,
    pub sampler: SamplerConfig,
    pub mixtures: Vec<NamedMixture>,
    pub estimators: Vec<NamedEstimator>,
    pub composition: CompositionConfig,
    pub task: TaskConfig,
    pub sweep: SweepConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub solver: Solver,
    pub steps: usize,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedMixture {
    pub name: String,
    pub components: Vec<ComponentSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedEstimator {
    pub name: String,
    /// Name of the mixture whose exact score is perturbed.
    pub base: String,
    #[serde(default)]
    pub bias: Bias,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default)]
    pub freshness: Freshness,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompositionConfig {
    pub operator: Operator,
    pub members: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub target: Vec<f64>,
    pub radius: f64,
    /// Mixture name of the demonstration distribution.
    pub data: String,
    #[serde(default)]
    pub metric: Metric,
    pub episodes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub grid_step: f64,
    pub episodes: usize,
    /// Estimator names; the weight `w` multiplies `first`.
    pub first: String,
    pub second: String,
}

/// Fixtures of the verification suites.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub prop1_variances: [f64; 2],
    pub prop1_dim: usize,
    pub prop1_time: f64,
    pub prop1_grid_step: f64,
    pub prop1_draws: usize,
    pub prop1_tolerance: f64,
    pub gronwall_bias: f64,
    pub gronwall_steps: usize,
    pub gronwall_pairs: usize,
    pub corollary_delta: f64,
    pub corollary_steps: usize,
    pub corollary_pairs: usize,
    pub conversion_probes: usize,
    pub conversion_tolerance: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            prop1_variances: [1.0, 4.0],
            prop1_dim: 2,
            prop1_time: 0.5,
            prop1_grid_step: 0.001,
            prop1_draws: 1_000_000,
            prop1_tolerance: 0.02,
            gronwall_bias: 0.1,
            gronwall_steps: 1000,
            gronwall_pairs: 1000,
            corollary_delta: 0.1,
            corollary_steps: 1000,
            corollary_pairs: 64,
            conversion_probes: 10_000,
            conversion_tolerance: 1e-12,
        }
    }
}

fn isotropic_rows(d: usize, var: f64) -> Vec<Vec<f64>> {
    (0..d)
        .map(|i| (0..d).map(|j| if i == j { var } else { 0.0 }).collect())
        .collect()
}

impl Default for ExperimentConfig {
    /// The symmetric bench, see [`ExperimentConfig::two_shift`].
    fn default() -> Self {
        ExperimentConfig::two_shift(1.0, -1.0)
    }
}

impl ExperimentConfig {
    /// Two-member bench around a tight Gaussian target. The parents are exact
    /// scores of the target translated by `first_shift e1` and
    /// `second_shift e1`; a convex weight `w` therefore centres the composed
    /// law at `target + (w first_shift + (1 - w) second_shift) e1`.
    pub fn two_shift(first_shift: f64, second_shift: f64) -> Self {
        let target = vec![0.5, -0.5];
        let mixture = NamedMixture {
            name: "demo".into(),
            components: vec![ComponentSpec {
                weight: 1.0,
                mean: target.clone(),
                cov: isotropic_rows(2, 0.04),
            }],
        };
        let shifted = |name: &str, dx: f64| NamedEstimator {
            name: name.into(),
            base: "demo".into(),
            bias: Bias::MeanShift { delta: vec![dx, 0.0] },
            noise: NoiseSpec::None,
            freshness: Freshness::PerCall,
        };
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            seed: 20_240_601,
            output_dir: "gpc-out".into(),
            schedule: NoiseSchedule::vp_linear(),
            sampler: SamplerConfig {
                solver: Solver::Ddim,
                steps: 100,
                samples: 1000,
            },
            mixtures: vec![mixture],
            estimators: vec![shifted("first", first_shift), shifted("second", second_shift)],
            composition: CompositionConfig {
                operator: Operator::Convex { weights: vec![0.5, 0.5] },
                members: vec!["first".into(), "second".into()],
            },
            task: TaskConfig {
                target,
                radius: 0.3,
                data: "demo".into(),
                metric: Metric::SuccessRate,
                episodes: 500,
            },
            sweep: SweepConfig {
                grid_step: 0.1,
                episodes: 500,
                first: "first".into(),
                second: "second".into(),
            },
            verify: VerifyConfig::default(),
        }
    }
}

/// Live objects built from a configuration.
pub struct Resolved {
    pub mixtures: BTreeMap<String, Arc<GaussianMixture>>,
    pub estimators: BTreeMap<String, FieldRef>,
    pub task: BenchTask,
}

impl Resolved {
    pub fn estimator(&self, name: &str) -> &FieldRef {
        &self.estimators[name]
    }
}

fn config_err(path: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{path}: {msg}"))
}

impl ExperimentConfig {
    /// Parse TOML; syntax and type errors carry line and column.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(&path.display().to_string(), e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Structural checks that do not need to build any field.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(config_err(
                "schema_version",
                format!("unsupported version {}, expected {SCHEMA_VERSION}", self.schema_version),
            ));
        }
        // TOML integers are signed 64-bit.
        if self.seed > i64::MAX as u64 {
            return Err(config_err("seed", "must fit in a signed 64-bit integer"));
        }
        self.schedule.validate().map_err(|e| config_err("schedule", e))?;
        if self.sampler.steps == 0 {
            return Err(config_err("sampler.steps", "must be at least 1"));
        }
        let mut mixture_names = BTreeMap::new();
        for (i, m) in self.mixtures.iter().enumerate() {
            if mixture_names.insert(m.name.as_str(), i).is_some() {
                return Err(config_err(&format!("mixtures[{i}].name"), format!("duplicate name '{}'", m.name)));
            }
        }
        let mut estimator_names = BTreeMap::new();
        for (i, e) in self.estimators.iter().enumerate() {
            if estimator_names.insert(e.name.as_str(), i).is_some() {
                return Err(config_err(&format!("estimators[{i}].name"), format!("duplicate name '{}'", e.name)));
            }
            if !mixture_names.contains_key(e.base.as_str()) {
                return Err(config_err(&format!("estimators[{i}].base"), format!("unknown mixture '{}'", e.base)));
            }
        }
        for (i, m) in self.composition.members.iter().enumerate() {
            if !estimator_names.contains_key(m.as_str()) {
                return Err(config_err(&format!("composition.members[{i}]"), format!("unknown estimator '{m}'")));
            }
        }
        if !mixture_names.contains_key(self.task.data.as_str()) {
            return Err(config_err("task.data", format!("unknown mixture '{}'", self.task.data)));
        }
        for (field, name) in [("sweep.first", &self.sweep.first), ("sweep.second", &self.sweep.second)] {
            if !estimator_names.contains_key(name.as_str()) {
                return Err(config_err(field, format!("unknown estimator '{name}'")));
            }
        }
        crate::theory::weight_grid(self.sweep.grid_step).map_err(|e| config_err("sweep.grid_step", e))?;
        Ok(())
    }

    /// Build mixtures, estimators and the bench task.
    pub fn resolve(&self) -> Result<Resolved> {
        self.validate()?;
        let mut mixtures = BTreeMap::new();
        for (i, m) in self.mixtures.iter().enumerate() {
            let spec = MixtureSpec {
                components: m.components.clone(),
            };
            let g = GaussianMixture::new(&spec).map_err(|e| config_err(&format!("mixtures[{i}]"), e))?;
            mixtures.insert(m.name.clone(), Arc::new(g));
        }
        let mut estimators = BTreeMap::new();
        for (i, e) in self.estimators.iter().enumerate() {
            let spec = EstimatorSpec {
                base: mixtures[&e.base].clone(),
                bias: e.bias.clone(),
                noise: e.noise.clone(),
                freshness: e.freshness,
            };
            let seed = rng::derive_seed(self.seed, &[rng::tag::FIELD, i as u64]);
            let f = make_estimator(&spec, self.schedule, seed).map_err(|err| config_err(&format!("estimators[{i}]"), err))?;
            estimators.insert(e.name.clone(), Arc::new(f) as FieldRef);
        }
        let task = BenchTask::with_data(
            self.task.target.clone(),
            self.task.radius,
            mixtures[&self.task.data].clone(),
            self.sampler.steps,
            self.sampler.solver,
            self.task.metric,
        )
        .map_err(|e| config_err("task", e))?;
        Ok(Resolved {
            mixtures,
            estimators,
            task,
        })
    }

    /// The configured composition as a field.
    pub fn composed(&self, resolved: &Resolved) -> Result<ComposedField> {
        let members = self
            .composition
            .members
            .iter()
            .map(|m| resolved.estimator(m).clone())
            .collect();
        ComposedField::new(CompositionSpec {
            operator: self.composition.operator.clone(),
            members,
        })
        .map_err(|e| config_err("composition", e))
    }
}
