//! Trainable quasi-dense image matching.
//!
//! The pipeline correlates descriptors into a score map, builds a
//! fine-to-coarse pyramid by max pooling and corner aggregation, decodes it
//! coarse-to-fine into refined scores, and extracts, verifies and densifies
//! matches. Every stage is differentiable, so the per-level exponents and the
//! descriptor weights can be trained with a structured hinge loss.

pub mod autograd;
pub mod decoder;
pub mod descriptors;
pub mod error;
pub mod geometry;
pub mod io;
pub mod matching;
mod par;
pub mod pipeline;
pub mod pyramid;
pub mod score;
pub mod training;

pub use error::{Error, Result};
pub use geometry::{GeometryConfig, LevelGeometry};
pub use score::{is_sentinel, ScoreMap, Stage, SENTINEL};
