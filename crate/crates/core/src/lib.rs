//! Edge transformer: a reverse-mode tensor engine, triangular attention over
//! pairwise edge states, complete encoder and encoder-decoder models, synthetic
//! compositional tasks and a deterministic training harness.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the two concrete instantiations.

pub mod attention;
pub mod autodiff;
pub mod error;
pub mod model;
pub mod scalar;
pub mod tasks;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tensor::{BoolTensor, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = autodiff::Graph<f32>;
pub type Graph64 = autodiff::Graph<f64>;
pub type Encoder32 = model::EncoderModel<f32>;
pub type Encoder64 = model::EncoderModel<f64>;
pub type Seq2Seq32 = model::Seq2SeqModel<f32>;
pub type Seq2Seq64 = model::Seq2SeqModel<f64>;
