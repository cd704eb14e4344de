//! Random query patch detection: unsupervised pre-training of a
//! set-prediction transformer detector, built on a small f64 autodiff core.

pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod matcher;
pub mod model;
pub mod pretext;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
