pub mod canonical;
pub mod deform;
pub mod error;
pub mod fit;
pub mod geomio;
pub mod headmodel;
pub mod math;
pub mod neuralnet;
pub mod par;
pub mod render;
pub mod train;

pub use error::{Error, Result};
