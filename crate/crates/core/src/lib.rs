//! Streaming flow-matching engine built around a ring buffer of in-flight
//! generations, with a deterministic toy model and codec.

pub mod codec;
pub mod curve;
pub mod driver;
pub mod engine;
pub mod error;
pub mod latent;
pub mod model;
pub mod pipeline;
pub mod registry;
pub mod rng;
pub mod schedule;
pub mod solver;

pub use curve::{Curve, CurveField, CurveKind, CurveSet, ResolvedCurves};
pub use engine::{DiffusionEngine, Request};
pub use error::{Error, Result};
pub use latent::{mse, rms_diff, segment_cosine_similarity, Latent};
pub use model::{BlendTerm, ConditionSet, ModelConfig, ModelWeights, ToyModel};
pub use registry::SharedRegistry;
pub use schedule::{build_schedule, migrate_schedule, ScheduleCache, ScheduleId, TimestepSchedule};
pub use solver::{GuidanceMode, SolverKind, StepState};
