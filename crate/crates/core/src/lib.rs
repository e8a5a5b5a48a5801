//! Multi-modal feature matching with modal-assistant transformers.

pub mod error;
pub mod evalkit;
pub mod geometry;
pub mod image;
pub mod losses;
pub mod matching;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod augment;
pub mod rng;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};
