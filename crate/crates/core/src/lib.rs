//! Depth from defocus with the Blurry-Edges patch representation.

pub mod aggregate;
pub mod error;
pub mod eval;
pub mod fit;
pub mod geometry;
pub mod grid;
pub mod io;
pub mod optics;
pub mod par;
pub mod pipeline;
pub mod real;
pub mod render;
pub mod synth;

pub use error::{Error, Result};
