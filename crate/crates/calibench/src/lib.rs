//! Harness for measuring how well vision-language models verbalize
//! confidence: runs tagged-answer prompting strategies against any
//! OpenAI-compatible endpoint and computes calibration statistics.

pub mod client;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod parsing;
pub mod prompting;
pub mod report;
pub mod scoring;

pub use error::{Error, Result};
