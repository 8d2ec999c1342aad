//! Maximum-shift quantification from 2D slices.
//!
//! A U-shaped network predicts a stationary velocity field that is integrated
//! into a diffeomorphic deformation. Training combines sparse landmark labels
//! with two frozen noise-prediction models: their output difference is fed to
//! the network as an extra channel, and guided DDIM edits produce "normal"
//! counterparts of unlabeled slices for a warp-consistency loss.

pub mod cli;
pub mod data;
pub mod deform;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod nn;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
