//! Controllable person image synthesis: pose transfer and clothing transfer through a
//! dense correspondence between a target-pose encoding and a part-decomposed encoding
//! of the source image.

pub mod correspondence;
pub mod data;
pub mod discriminator;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod generator;
pub mod losses;
pub mod nn;
pub mod parsing;
pub mod renderer;
pub mod training;

pub use error::{Error, Result};
