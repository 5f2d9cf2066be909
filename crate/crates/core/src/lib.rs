//! Mixed-domain terrain segmentation experiments.

pub mod composition;
pub mod experiment;
pub mod ingest;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod synthetic;
pub mod taxonomy;
pub mod train;
pub mod tensor;

pub use scalar::Scalar;
pub use tensor::Tensor;

pub type SegModelF32 = nn::SegModel<f32>;
pub type SegModelF64 = nn::SegModel<f64>;
pub type DatasetF32 = train::Dataset<f32>;
pub type DatasetF64 = train::Dataset<f64>;
pub type TensorF32 = tensor::Tensor<f32>;
pub type TensorF64 = tensor::Tensor<f64>;
pub type LogitFieldF32 = losses::LogitField<f32>;
pub type LogitFieldF64 = losses::LogitField<f64>;
