//! Class-encoders, class-encoding classifiers (CEC) and their deep
//! convolutional variant (DCEC), trained on intra-class sample pairs.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod layers;
pub mod models;
pub mod objectives;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
