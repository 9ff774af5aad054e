pub mod analysis;
mod binio;
pub mod data;
pub mod distill;
pub mod dualbranch;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod ndcore;
pub mod rng;
pub mod scalar;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = ndcore::Tensor<f32>;
pub type Tensor64 = ndcore::Tensor<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
