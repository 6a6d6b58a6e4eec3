//! Top-down tree LSTM models for predicting how content spreads through a
//! sharing network, plus the data pipeline around them.

pub mod baselines;
pub mod cascade;
pub mod d2dlstm;
pub mod error;
pub mod features;
pub mod generation;
pub mod io;
pub mod kmeans;
pub mod nn;
pub mod pipeline;
pub mod prototypes;
pub mod rng;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
