//! Attention BiLSTM seizure/non-seizure classification for multichannel EEG.

pub mod autodiff;
pub mod cli;
pub mod dataset;
pub mod edf;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod seeds;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
