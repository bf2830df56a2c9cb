//! Tile-streamed forward and backward passes over a network's local prefix.

mod engine;
mod plan;
mod stats;

pub use engine::{
    crop_relevant_gradient, crop_unique, stream_backward, stream_forward, FilledMask,
    StreamGradients, StreamState,
};
pub use plan::{plan_for, plan_for_grid, plan_tiles, PlanMode, Tile, TilePlan};
pub use stats::{
    class_gradient, saliency, saliency_map, stream_stats, ChannelStats, StatsAccumulator,
};
