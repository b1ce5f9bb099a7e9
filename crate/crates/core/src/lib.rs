//! All-weather image restoration with spatially-adaptive residual distillation.

pub mod config;
pub mod cwp;
pub mod data;
pub mod decoder;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod image;
pub mod losses;
pub mod model;
pub mod nn;
pub mod synth;
pub mod teacher;
pub mod train;

pub use error::{Error, Result};
