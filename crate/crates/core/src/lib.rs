//! Representation-space separability experiments: synthetic 3D ultrasound
//! phantom, patch augmentation, three autoencoder variants trained with a
//! small in-crate autodiff engine, and clustering-based evaluation of the
//! latent spaces.

pub mod augmentation;
pub mod autoencoders;
pub mod error;
pub mod experiment;
pub mod nn;
pub mod rspace_eval;
pub mod seed;
pub mod volume_data;

pub use error::{Error, Result};
