pub mod augment;
pub mod cli;
pub mod clsops;
pub mod config;
pub mod distillation;
pub mod error;
pub mod features;
pub mod generators;
pub mod image;
pub mod inversion;
pub mod losses;
pub mod nn;
pub mod perceptual;
pub mod synthetic;
pub mod training;
pub mod vit;

pub use error::{Error, Result};
