//! Personalized end-to-end memory network for retrieval-based goal-oriented
//! dialog: encoding, knowledge base, model with analytic gradients, training,
//! evaluation and a synthetic corpus generator.

pub mod checkpoint;
pub mod data;
pub mod encoding;
pub mod error;
pub mod eval;
pub mod kb;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
