//! Holistic video frame interpolation in a chunked latent space.

pub mod attention;
pub mod conditioning;
pub mod config;
pub mod denoiser;
pub mod error;
pub mod flow;
pub mod graph;
pub mod params;
pub mod pipeline;
pub mod scheduler;
pub mod store;
pub mod tensor;
pub mod tiling;
pub mod train;
pub mod vae;
pub mod video;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
pub use tiling::{ChunkPlan, FrameCodec, LatentGrid, TilePlan};
pub use video::FrameSequence;
