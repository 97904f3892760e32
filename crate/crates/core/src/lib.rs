//! Demonstration-sequence construction, caption metrics and attention
//! analysis for multimodal in-context learning.

pub mod assignment;
pub mod attention_metrics;
pub mod cli;
pub mod config;
pub mod efficiency;
pub mod error;
pub mod interchange;
pub mod oracle;
pub mod report;
pub mod retrieval;
pub mod segmentation;
pub mod synth;
pub mod text_metrics;

pub use error::{Error, Result};
