//! Item-conditioned cross-attention training for vision-language models
//! supervised by itemized text: every image comes with a list of
//! independent text items, and each item queries the visual tokens through
//! a shared cross-attention module.

pub mod attention;
pub mod batching;
pub mod cli;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod imageio;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
