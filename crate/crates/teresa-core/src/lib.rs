//! Conversational query rewriting, end to end: self-supervised triplet
//! construction from dialogue corpora, a transformer encoder-decoder with a
//! dual-source copy mechanism, attention-graph keyword scoring, intent
//! consistency training, beam-search decoding, and evaluation.

pub mod autodiff;
pub mod beam;
pub mod checkpoint;
pub mod error;
pub mod icc;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod sakd;
pub mod ssl;
pub mod synth;
pub mod text;
pub mod train;

pub use error::{Result, TeresaError};
