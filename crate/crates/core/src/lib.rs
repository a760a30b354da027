//! Selective state-space masked autoencoder for 3D multi-channel volumes,
//! built on a minimal f64 autodiff engine. Everything is deterministic:
//! fixed seeds produce byte-identical checkpoints and reports, with or
//! without the `parallel` feature.

pub mod bench;
pub mod cli;
pub mod data;
pub mod error;
pub mod harness;
pub mod numcore;
pub mod par;
pub mod model;
pub mod saliency;
pub mod ssm;
pub mod vim;
pub mod volume3d;

pub use error::{Error, Result};
