//! Multi-hypothesis 3D face reconstruction under occlusion.
//!
//! Shape and expression coefficients of a linear head model are sampled from
//! conditional diffusion models, a listwise ranker picks the best shape, and
//! evaluation scores reconstructions on the visible part of the face.

pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod head;
pub mod pipeline;
pub mod rank;

pub use error::{Error, Result};
