//! Contextual bias attention (CBA) for hybrid CTC/attention sequence recognition.

pub mod autodiff;
pub mod bias_corpus;
pub mod config;
pub mod decoding;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod parallel;
pub mod params;
pub mod pipeline;
pub mod synth_data;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
