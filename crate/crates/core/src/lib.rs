pub mod ablation;
pub mod audit;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod model;
pub mod params;
pub mod prompt_pool;
pub mod rng;
pub mod synthcorpus;
pub mod tensor;
pub mod train;
pub mod visual;

pub use error::{Error, Result};
