//! Diffusion world model over fixed-length trajectory segments.

mod exact;
mod model;
mod normalizer;
mod schedule;
mod segment;

pub use model::{
    reverse_mean_clamped, reverse_mean_from_eps,
    Inpaint, NoiseModel, NoisePredictor, ReverseHook, Sampler, SegmentLayout, SegmentRng, StepContext, WorldModel,
    WorldModelConfig,
    MAX_RESAMPLES,
};
pub(crate) use model::standard_normal_row;
pub use exact::MixtureNoise;
pub use normalizer::{Normalizer, RunningStats, STD_FLOOR};
pub use schedule::{default_beta_bounds, DiffusionSchedule};
pub use segment::TrajectorySegment;

use crate::numerics::NumericsError;

#[derive(Debug, thiserror::Error)]
pub enum WorldModelError {
    #[error("invalid segment: {0}")]
    Segment(String),
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("non-finite sample: {0}")]
    NonFinite(String),
    #[error("guidance: {0}")]
    Guidance(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}
