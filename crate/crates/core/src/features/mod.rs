//! Oriented contour features: Gabor energy, non-maximum suppression and the
//! scale pyramid.

mod energy;
mod extract;
mod gabor;
mod pyramid;

pub use energy::{orientation_energy, EnergyVolume};
pub use extract::{argmax, extract_features, normal_step, suppress, FeatureSet, OrientedFeature};
pub use gabor::{
    build_gabor_bank, kernel_radius, truncated_mass, GaborBank, GaborKernel, Phase,
    MAX_TRUNCATED_MASS,
};
pub use pyramid::{build_pyramid, rescale, PyramidLevel};

use rayon::prelude::*;

use crate::config::{FeatureConfig, PyramidConfig};
use crate::error::Result;
use crate::raster::Plane;

/// Features for every pyramid level of `image`, level index recorded in
/// each set. Levels too small for the filter support are dropped.
pub fn extract_pyramid(
    image: &Plane,
    bank: &GaborBank,
    features: &FeatureConfig,
    pyramid: &PyramidConfig,
) -> Result<Vec<(PyramidLevel, FeatureSet)>> {
    let levels = build_pyramid(image, pyramid);
    let results: Vec<Result<Option<(PyramidLevel, FeatureSet)>>> = levels
        .into_par_iter()
        .enumerate()
        .map(|(k, level)| {
            if level.image.width() < bank.support() || level.image.height() < bank.support() {
                return Ok(None);
            }
            let mut fs = extract_features(&level.image, bank, features.min_energy)?;
            fs.scale_index = k;
            Ok(Some((level, fs)))
        })
        .collect();
    let mut out = Vec::new();
    for r in results {
        if let Some(v) = r? {
            out.push(v);
        }
    }
    Ok(out)
}
