//! Adversarial face-cloaking toolkit.
//!
//! Trains a feed-forward perturbation generator against face-embedding
//! models (targeted and untargeted, with or without a discriminator),
//! distills it into a compact student U-Net, and evaluates attack success,
//! blur robustness, visual similarity and embedding-space geometry on a
//! synthetic identity dataset.

pub mod adversary;
pub mod checkpoint;
pub mod dataset;
pub mod distill;
pub mod embedder;
pub mod error;
pub mod evaluation;
pub mod imaging;
pub mod losses;
pub mod nn;
pub mod pngio;
pub mod training;
pub mod tsne;

pub use error::{Error, Result};
