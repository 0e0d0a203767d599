//! Weight-inherited distillation for BERT-style transformers.

pub mod alignment;
pub mod corpus;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod io;
pub(crate) mod linalg;
pub mod merge;
pub mod model;
pub mod ops;
pub mod optim;
pub mod pipeline;
pub mod reparam;
pub mod runconfig;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
