//! A small volumetric deep-learning engine: 3-D Inception-style pipelines with
//! late fusion, trained with RMSprop on class-balanced shift-augmented ROI
//! volumes.

pub mod arch;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod seed;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
