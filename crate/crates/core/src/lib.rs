pub mod deform_attn;
pub mod denoiser;
pub mod encoders;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod heads;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod numerics;
pub mod scenegen;

pub use error::{Error, Result};
pub use geometry::{CameraModel, EgoPose, VoxelGridSpec};
pub use harness::{GlobalFusion, PipelineConfig, RunReport};
pub use numerics::{ParamStore, Rng, Tape, Tensor, Var};
