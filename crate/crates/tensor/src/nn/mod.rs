pub mod layers;
pub mod optim;
pub mod param;

pub use layers::{Conv, ConvNorm, Norm, NormKind};
pub use optim::{OptimKind, Optimizer};
pub use param::{join, BufferUpdate, Ctx, Module, Param};
