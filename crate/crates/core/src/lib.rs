//! Composition of diffusion and flow score fields.
//!
//! Fields evaluate a prediction at `(t, x)` with `t = 0` on the data and
//! `t = 1` on pure noise. They can be converted between parameterizations,
//! combined with convex, OR and AND operators and integrated back to data
//! with deterministic samplers. The `theory`, `search` and `bench` modules
//! measure how much a composition helps and where its weight should sit.

pub mod bench;
pub mod compose;
pub mod config;
pub mod error;
pub mod experiment;
pub mod field;
pub mod oracle;
pub mod param;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod search;
pub mod svg;
pub mod theory;

pub use bench::{BenchResult, BenchTask, BenchTaskSpec, Metric};
pub use compose::{ComposedField, CompositionSpec, Operator};
pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use field::{FieldRef, NoiseCtx, ScoreField};
pub use oracle::{EstimatorField, EstimatorSpec, GaussianMixture, MixtureSpec, OracleField};
pub use param::{Prediction, PredictionKind};
pub use sampler::{StreamSeeds, Trajectory};
pub use schedule::{NoiseSchedule, Solver};
pub use search::{PoolEntry, RewardPool, SearchResult};
pub use theory::{EstimatorPair, MseCurve, MseQuadratic};
