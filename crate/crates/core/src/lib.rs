pub mod backbone2d;
pub mod backbone3d;
pub mod blocks;
pub mod bridge;
pub mod checkpoint;
pub mod config;
pub mod cps;
pub mod ctam;
pub mod error;
pub mod losses;
pub mod phantom;
pub mod pipeline;
pub mod stage2;
pub mod stitch;
pub mod volume;
pub mod workflow;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
