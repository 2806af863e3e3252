//! Post-processing and evaluation for anchor-based face detectors.
//!
//! Everything here works on boxes and scores produced by an external model:
//!
//! - [`anchors`]: the dense stride-16 anchor lattice,
//! - [`targets`]: first/second-stage label assignment, minibatch sampling and
//!   box regression coding,
//! - [`postprocess`]: top-k proposal selection, greedy NMS and the
//!   multi-scale voted ensemble,
//! - [`evaluation`]: per-subset precision/recall and average precision,
//! - [`widerio`]: the WIDER FACE annotation and detection text formats.

pub mod anchors;
pub mod cli;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod postprocess;
pub mod targets;
pub mod widerio;

pub use error::{Error, Result};
pub use geometry::{BBox, ImageSize};
pub use postprocess::Detection;
pub use targets::GroundTruth;
