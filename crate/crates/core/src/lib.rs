//! Two-step aerial pedestrian action search.
//!
//! A small single-shot detector proposes pedestrians on a downscaled frame;
//! each proposal is cut from the full-resolution frame and passed with a
//! bag-of-words action query through a fusion network that answers yes/no.

pub mod anchors;
pub mod error;
pub mod eval;
pub mod detector;
pub mod geometry;
pub mod io;
pub mod nn;
pub mod pipeline;
pub mod qa;
pub mod scene;

pub use error::{Error, Result};
pub use geometry::{BBox, Detection};
