pub mod a2e;
pub mod audio_features;
pub mod checkpoint;
pub mod error;
pub mod face_model;
pub mod losses;
pub mod nn;
pub mod oracle;
pub mod real;
pub mod renderer;
pub mod seed;
pub mod training;

pub use error::{Error, Result};
