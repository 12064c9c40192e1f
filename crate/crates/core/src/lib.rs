pub mod cost;
pub mod error;
pub mod meta;
pub mod nn;
pub mod numeric;
pub mod oracle;
pub mod pareto;
pub mod predictors;
pub mod sampler;
pub mod score;
pub mod seed;
pub mod space;
pub mod stats;
pub mod tuner;

pub use error::{Error, Result};

pub type TensorF32 = numeric::Tensor<f32>;
pub type TensorF64 = numeric::Tensor<f64>;
pub type ScoreNetF32 = score::ScoreNet<f32>;
pub type ScoreNetF64 = score::ScoreNet<f64>;
pub type PredictorSetF32 = predictors::PredictorSet<f32>;
pub type PredictorSetF64 = predictors::PredictorSet<f64>;
