pub mod attacks;
pub mod config;
pub mod container;
pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod fedsim;
pub mod nn;
pub mod pipeline;
pub mod seeds;
pub mod tardos;
pub mod whitebox;

pub use error::{Error, Result};
