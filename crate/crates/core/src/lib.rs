//! Separation of reverberant multi-speaker speech with deep attractor
//! networks, from scene synthesis to evaluation.

pub mod autodiff;
pub mod error;
pub mod harness;
pub mod io;
pub mod masks;
pub mod metrics;
pub mod nn;
pub mod scene;
pub mod transforms;

pub use error::{Error, Result};
