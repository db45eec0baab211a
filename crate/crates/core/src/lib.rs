//! Attention-based LSTM encoders for ranking question/answer and
//! question/question pairs in community forums.

pub mod classifier;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
