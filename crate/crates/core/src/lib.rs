pub mod analysis;
pub mod config;
pub mod corpus;
pub mod denoiser;
pub mod error;
pub mod fuser;
pub mod gradsuite;
pub mod media;
pub mod params;
pub mod rng;
pub mod schedule;
pub mod tensor;
pub mod textcond;
pub mod train;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{DType, Tensor};
