//! Triplane 3D GAN distilled adversarially from a pluggable 2D prior.

pub mod augment;
pub mod cache;
pub mod camera;
pub mod discriminator;
pub mod error;
pub mod eval;
pub mod field;
pub mod generator;
pub mod image;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod params;
pub mod perceptual;
pub mod pipeline;
pub mod prior;
pub mod prune;
pub mod reference;
pub mod render;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
