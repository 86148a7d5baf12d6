//! Active one-shot labeling agent: an LSTM Q-network that, for each image in
//! a stream, either predicts a label or pays to see it.

pub mod charts;
pub mod codec;
pub mod dataset;
pub mod env;
pub mod error;
pub mod eval;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
