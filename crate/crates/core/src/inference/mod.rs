//! Bottom-up parsing of an image with a vocabulary.
//!
//! Layer 1 matches edge models against feature vectors. Every higher layer
//! scores compositions anchored at states of their reference part's OR node,
//! each part taking its best candidate inside a Mahalanobis window, then
//! prunes, downsamples and pools compositions into their OR nodes.

mod engine;
mod graph;
mod index;

pub use engine::{deformation, downsample, pool_or, window_m2, Engine, Scored};
pub use graph::{merge_supports, GraphLayer, InferenceGraph, NodeKind, NodeRef, State};
pub use index::LayerIndex;

use crate::config::Config;
use crate::error::Result;
use crate::features::{build_gabor_bank, extract_features};
use crate::raster::Plane;
use crate::vocabulary::Vocabulary;

/// Extract features of `image` at its native scale and parse up to `up_to`.
pub fn infer(
    image: &Plane,
    vocab: &Vocabulary,
    config: &Config,
    up_to: usize,
) -> Result<InferenceGraph> {
    let bank = build_gabor_bank(&config.features.gabor)?;
    let features = extract_features(image, &bank, config.features.min_energy)?;
    Engine::new(vocab)?.infer(&features, up_to)
}
