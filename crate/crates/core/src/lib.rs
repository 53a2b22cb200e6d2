//! Learning and using a hierarchy of compositional shape models.
//!
//! Oriented edge features are grouped into ever larger deformable
//! compositions, layer by layer. The same vocabulary parses new images
//! bottom-up; its top layers act as multi-class object detectors.

pub mod config;
pub mod dataset;
pub mod error;
pub mod features;
pub mod geometry;
pub mod eval;
pub mod inference;
pub mod multiclass;
pub mod or_learning;
pub mod param_learning;
pub mod raster;
pub mod structure_learning;
pub mod synth;
pub mod vocabulary;

pub use config::Config;
pub use error::{Error, Result};
pub use geometry::{iou, BBox, Gaussian2};
pub use inference::{Engine, InferenceGraph, NodeRef};
pub use raster::Plane;
pub use vocabulary::Vocabulary;
