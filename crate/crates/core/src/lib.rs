//! A desk-scale laboratory for masked-language-model pretraining objectives.
//!
//! The crate carries its own small autodiff engine and Transformer encoder,
//! the masked-LM and token-alignment contrastive losses (with ablations), the
//! intra/inter-context representation probes, and the training loop that ties
//! them together.

pub mod autodiff;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod objectives;
pub mod parallel;
pub mod probes;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
