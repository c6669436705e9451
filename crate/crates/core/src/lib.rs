//! Unified speech-language transformer for end-to-end spoken language
//! understanding.
//!
//! A single transformer reads projected speech-encoder frames followed by
//! text tokens. Speech positions attend bidirectionally among themselves;
//! text positions see all speech plus the text to their left. The model is
//! trained with a conditional masked-LM objective and decodes by repeatedly
//! appending a `[MASK]` token and filling it in.

pub mod error;
pub mod exec;
pub mod numkit;
pub mod rng;

pub use error::{Error, Result};
pub mod composer;
pub mod config;
pub mod corpus;
pub mod generator;
pub mod model;
pub mod pipeline;
pub mod slu_codec;
pub mod tokenizer;
pub mod trainer;
pub mod verify;
