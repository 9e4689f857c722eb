//! Articulated local-element surface codec: body model, patch decoder,
//! reverse-mode tensors, losses, synthetic data and the training pipeline.

pub mod body;
pub mod codec;
pub mod data;
pub mod error;
pub mod geom;
pub mod loss;
pub mod pipeline;
pub mod scalar;
pub mod seed;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::{DType, Real};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ScaleModel32 = codec::ScaleModel<f32>;
pub type ScaleModel64 = codec::ScaleModel<f64>;
pub type BodyTemplate32 = body::BodyTemplate<f32>;
pub type BodyTemplate64 = body::BodyTemplate<f64>;
pub type Dataset32 = data::Dataset<f32>;
pub type Dataset64 = data::Dataset<f64>;
