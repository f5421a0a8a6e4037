//! Attentional LSTM encoder-decoder for translation with an optional
//! target-side look-ahead attention over the decoder's own history.
//!
//! Everything is built on a small reverse-mode tape ([`autodiff`]) over dense
//! row-major tensors ([`tensor`]). Sentence-level work is data parallel
//! through [`parallel`] when the `parallel` feature is on.

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod decoding;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod model;
pub mod parallel;
pub mod recurrent;
pub mod rng;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use attention::AttentionMode;
pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
pub use tensor::{Scalar, Tensor};
