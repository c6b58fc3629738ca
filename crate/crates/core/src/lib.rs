//! Model-free building blocks for diffusion-based lane detection.
//!
//! - [`geometry`]: the lane grid, lane anchors, Line-IoU, NMS and the CULane
//!   text format.
//! - [`diffusion`]: cosine noise schedule, signal-space normalization,
//!   forward corruption and DDIM steps.
//! - [`synthdata`]: deterministic synthetic scenes, ground-truth padding and
//!   dataset I/O.
//! - [`evalmetrics`]: CULane F1 and TuSimple accuracy.

pub mod diffusion;
pub mod evalmetrics;
pub mod geometry;
pub mod synthdata;

pub use diffusion::{NoiseSchedule, ScaleConfig, Triple};
pub use geometry::{GridLane, LaneAnchor, LaneGrid, Polyline, ScoredLane};
pub use synthdata::{LaneScene, SceneConfig};
