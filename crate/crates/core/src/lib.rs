//! Video captioning with multi-scale feature fusion, region-masked encoding and
//! a gated shallow-context transformer decoder, trained with masked language
//! modelling and decoded with beam search. Ships its own autodiff substrate,
//! caption metrics and a synthetic moving-shapes corpus so the whole pipeline
//! runs and is verifiable on a CPU.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod infer;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
