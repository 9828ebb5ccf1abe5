//! Tokenised MEG modelling: signal tokeniser, patched transformer, sampling,
//! baselines and evaluation.

pub mod analysis;
pub mod baselines;
pub mod bursts;
pub mod data;
pub mod decoding;
pub mod error;
pub mod gpt;
pub mod numerics;
pub mod sampler;
pub mod tokeniser;
pub mod workbench;

pub use error::{Error, Result};
