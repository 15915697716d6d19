//! Regression Transformer at desk scale: numeric tokenization, numerical
//! encodings, permutation-language-model objectives over a two-stream
//! transformer, constrained decoding and evaluation protocols.

pub mod config;
pub mod data;
pub mod decoding;
pub mod encoding;
pub mod error;
pub mod evaluation;
pub mod masking;
pub mod model;
pub mod objectives;
pub mod tokenizer;

pub use error::{Error, Result};
