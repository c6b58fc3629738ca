//! Diffusion lane detector: model, label assignment, losses, training and
//! inference.

pub mod assign_loss;
pub mod checkpoint;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod roi;

pub use model::{DecoderOutput, DiffusionLane, FeaturePyramid, ModelConfig};
pub use pipeline::{InferConfig, TrainConfig, Trainer};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite loss term `{term}` ({value})")]
    NonFinite { term: &'static str, value: f64 },
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: std::path::PathBuf, msg: String },
    #[error(transparent)]
    Data(#[from] difflane_core::synthdata::DataError),
    #[error(transparent)]
    Geometry(#[from] difflane_core::geometry::GeometryError),
    #[error(transparent)]
    Diffusion(#[from] difflane_core::diffusion::DiffusionError),
}

pub type Result<T> = std::result::Result<T, Error>;
