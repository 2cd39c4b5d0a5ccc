//! voxplain-core: desk-scale analysis of pre/post-surgery volumetric
//! cohorts.
//!
//! The crate covers two phases. Phase I runs PCA over voxel cohorts and
//! derives voxel-wise variability maps (Euclidean magnitude, cosine
//! orientation) with atlas-based region selection. Phase II trains a
//! compact 3-D convolutional autoencoder and survival classifier, applies
//! six local attribution methods, globalizes the resulting saliency maps
//! via PCA, and refines them with a global explanation optimizer driven
//! by a composite faithfulness / sparseness / similarity loss.

pub mod attribution;
pub mod io;
pub mod latent;
pub mod models;
pub mod optimizer;
pub mod quality;
pub mod seed;
pub mod synth;
pub mod tensor;

pub use io::{Atlas, Volume, VolumeHeader};
pub use tensor::{Tape, Tensor};
