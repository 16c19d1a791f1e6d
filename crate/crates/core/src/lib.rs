pub mod autograd;
pub mod error;
pub mod fusion;
pub mod grid;
pub mod metrics;
pub mod nn;
pub mod ops;
pub mod par;
pub mod params;
pub mod swin3d;
pub mod train;
pub mod tensor;
pub mod unet3d;
pub mod volio;

pub use autograd::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::{FeatureMap, Tensor};
