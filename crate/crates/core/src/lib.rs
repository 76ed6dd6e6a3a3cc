//! Sketch- and style-conditioned image synthesis on discrete codebooks.

pub mod archive;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod imaging;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod raster;
pub mod refine;
pub mod style;
pub mod transformer;
pub mod vq;

pub use error::{CogsError, Result};
