//! Multilayer perceptrons with analytic gradients, a latent-conditioned feature grid and Adam.

pub mod adam;
pub mod mlp;
pub mod volume;

pub use adam::Adam;
pub use mlp::{sigmoid, Activation, Mlp, MlpConfig, Tape};
pub use volume::{FeatureGrid, FeatureVolume, FeatureVolumeConfig, Stencil};
