//! Diffusion policy over action chunks, conditioned on a part-query pooled
//! scene feature.

mod model;
mod pooling;
mod schedule;

pub use model::*;
pub use pooling::{attention_weights, pool_positions, pool_with_part_query};
pub use schedule::{ddim_step, forward_noise, make_schedule, NoiseSchedule, ScheduleConfig, ScheduleKind};
