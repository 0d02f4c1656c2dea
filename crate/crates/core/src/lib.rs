//! Video-generative value modeling over injected latent frames: a synthetic
//! manipulation simulator, latent codec, flow-matching velocity model,
//! sampler, a classification-head value baseline and evaluation metrics.

pub mod binclass;
pub mod checkpoint;
pub mod codec;
pub mod episode;
pub mod error;
pub mod eval;
pub mod model;
pub mod optim;
pub mod returns;
pub mod sampler;
pub mod sim;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
