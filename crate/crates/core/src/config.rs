//! Every tunable of the pipeline in one serializable place.
//!
//! Defaults follow the published settings where those exist (Gabor bank,
//! pruning threshold, radii, downsampling, MCMC iterations, test-time
//! upscaling); the rest are documented choices.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub version: u32,
    /// Global seed; every stochastic stage forks its own stream from it.
    pub seed: u64,
    pub features: FeatureConfig,
    pub pyramid: PyramidConfig,
    pub inference: InferenceConfig,
    pub layers: LayerConfig,
    pub learning: LearningConfig,
    pub or_learning: OrConfig,
    pub multiclass: MulticlassConfig,
    pub eval: EvalConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            version: CONFIG_VERSION,
            seed: 0x5eed,
            features: FeatureConfig::default(),
            pyramid: PyramidConfig::default(),
            inference: InferenceConfig::default(),
            layers: LayerConfig::default(),
            learning: LearningConfig::default(),
            or_learning: OrConfig::default(),
            multiclass: MulticlassConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl Config {
    /// Settings for the bundled synthetic shape corpus: smaller objects, a
    /// five-layer hierarchy, geometric-mean scores and no test-time
    /// upscaling.
    pub fn synthetic() -> Self {
        let mut c = Config::default();
        c.layers.object_layer = 5;
        c.multiclass.object_diagonal = 110.0;
        c.pyramid.upscale = 1.0;
        c.pyramid.levels = 3;
        c.inference.aggregation = Aggregation::GeometricMean;
        c
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Config> {
        let text = std::fs::read_to_string(path)?;
        let config: Config =
            toml::from_str(&text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::InvalidConfig(format!(
                "config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.features.gabor.validate()?;
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.pyramid.scales_per_octave == 0 || self.pyramid.levels == 0 {
            return bad("pyramid needs at least one level and one scale per octave");
        }
        if !(self.inference.tau > 0.0 && self.inference.tau < 1.0) {
            return bad("tau must lie in (0, 1)");
        }
        if self.layers.object_layer < 3 {
            return bad("object layer must be at least 3");
        }
        if !(self.layers.downsample > 0.0 && self.layers.downsample <= 1.0) {
            return bad("downsampling factor must lie in (0, 1]");
        }
        if self.learning.beta <= 1.0 {
            return bad("beta must exceed 1");
        }
        if !(self.learning.polish_add_floor >= 0.0) {
            return bad("polish_add_floor must be non-negative");
        }
        if self.learning.max_parts < 2 {
            return bad("compositions need room for at least two parts");
        }
        Ok(())
    }

    /// Deterministic per-stage seed derived from the global seed.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        // FNV-1a over the stage name, mixed with the global seed
        let mut h: u64 = 0xcbf29ce484222325 ^ self.seed;
        for b in stage.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }
}

/// Gabor filter bank parameters (wavelength, aspect ratio and envelope
/// width in pixels; orientation count).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaborBankConfig {
    pub wavelength: f64,
    pub aspect: f64,
    pub sigma: f64,
    pub orientations: usize,
}

impl Default for GaborBankConfig {
    fn default() -> Self {
        GaborBankConfig {
            wavelength: 6.0,
            aspect: 0.75,
            sigma: 2.0,
            orientations: 6,
        }
    }
}

impl GaborBankConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.orientations >= 2
            && self.wavelength > 0.0
            && self.aspect > 0.0
            && self.sigma > 0.0
            && self.wavelength.is_finite()
            && self.aspect.is_finite()
            && self.sigma.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid Gabor bank {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub gabor: GaborBankConfig,
    /// Normalized energy below which suppressed maxima are discarded.
    pub min_energy: f32,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            gabor: GaborBankConfig::default(),
            min_energy: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PyramidConfig {
    pub scales_per_octave: usize,
    pub levels: usize,
    /// Factor applied to test images before building the pyramid.
    pub upscale: f64,
    /// Pyramid construction stops below this many pixels on the short side.
    pub min_size: usize,
    /// Blur sigma between levels, as a multiple of the level-to-level ratio.
    pub blur_factor: f64,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        PyramidConfig {
            scales_per_octave: 2,
            levels: 6,
            upscale: 3.0,
            min_size: 32,
            blur_factor: 0.8,
        }
    }
}

/// How part factors combine into a composition score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Plain product over parts.
    Product,
    /// Product raised to `1 / parts`, which keeps scores of deep compositions
    /// on the same scale as shallow ones.
    GeometricMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    /// Global pruning threshold used during learning and as the floor for
    /// learned per-composition thresholds.
    pub tau: f64,
    /// Constant deformation factor of repulsive parts.
    pub alpha: f64,
    /// Standard deviation of the reference part's placement Gaussian.
    pub epsilon: f64,
    pub aggregation: Aggregation,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            tau: 0.05,
            alpha: 0.1,
            epsilon: 0.5,
            aggregation: Aggregation::Product,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayerConfig {
    pub object_layer: usize,
    pub radius_first: u32,
    pub radius_middle: u32,
    pub radius_object: u32,
    /// Downsampling applied after every layer above the first.
    pub downsample: f64,
}

impl Default for LayerConfig {
    fn default() -> Self {
        LayerConfig {
            object_layer: 6,
            radius_first: 8,
            radius_middle: 12,
            radius_object: 15,
            downsample: 0.5,
        }
    }
}

impl LayerConfig {
    /// Neighborhood radius for learning layer `layer`, in grid units of the
    /// layer below.
    pub fn radius(&self, layer: usize) -> u32 {
        if layer <= 2 {
            self.radius_first
        } else if layer >= self.object_layer {
            self.radius_object
        } else {
            self.radius_middle
        }
    }

    pub fn rho(&self, layer: usize) -> f64 {
        if layer <= 1 {
            1.0
        } else {
            self.downsample
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningConfig {
    /// Supports overlapping at least this much (IoU) never pair up.
    pub max_overlap: f64,
    /// A histogram mode must hold this fraction of the histogram mass.
    pub mode_mass_floor: f64,
    /// Side of the square window used for mode detection and fitting.
    pub mode_window: usize,
    /// Histograms of layers above this one are smoothed before mode finding.
    pub smooth_above_layer: usize,
    pub geometry_floor: f64,
    pub layer1_floor: f64,
    pub layer1_prior_variance: f64,
    pub layer1_min_samples: usize,
    /// Parts penalty as a fraction of the mean best neighborhood coverage.
    pub parts_penalty: f64,
    pub slack: f64,
    /// Greedy selection stops below this fraction of the first pick's score.
    pub stop_fraction: f64,
    pub max_compositions: usize,
    pub beta: f64,
    pub mcmc_iterations: usize,
    /// Exchange / add / remove probabilities.
    pub move_mix: [f64; 3],
    /// The polish after the chain adds a candidate only if it raises the
    /// objective by at least this fraction of its current value.
    pub polish_add_floor: f64,
    pub center_cap: usize,
    pub max_parts: usize,
    pub max_duplet_matches: usize,
    pub max_object_duplet_matches: usize,
    pub em_rounds: usize,
    /// Derive repulsive parts from nested compositions after selection.
    pub repulsive_rule: bool,
}

impl Default for LearningConfig {
    fn default() -> Self {
        LearningConfig {
            max_overlap: 0.2,
            mode_mass_floor: 0.01,
            mode_window: 5,
            smooth_above_layer: 3,
            geometry_floor: 0.25,
            layer1_floor: 0.01,
            layer1_prior_variance: 0.05,
            layer1_min_samples: 10,
            parts_penalty: 0.05,
            slack: 0.1,
            stop_fraction: 0.05,
            max_compositions: 400,
            beta: 1.05,
            mcmc_iterations: 100,
            move_mix: [0.5, 0.25, 0.25],
            polish_add_floor: 0.005,
            center_cap: 2000,
            max_parts: 10,
            max_duplet_matches: 6,
            max_object_duplet_matches: 10,
            em_rounds: 3,
            repulsive_rule: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrConfig {
    pub radial_bins: usize,
    pub angular_bins: usize,
    /// Average-linkage merge cutoff in chi-square distance.
    pub cutoff: f64,
    pub samples: usize,
}

impl Default for OrConfig {
    fn default() -> Self {
        OrConfig {
            radial_bins: 5,
            angular_bins: 12,
            cutoff: 0.25,
            samples: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MulticlassConfig {
    /// Training objects are rescaled so their box diagonal is about this long.
    pub object_diagonal: f64,
    /// Context kept around each training box, as a fraction of its size.
    pub box_margin: f64,
    pub safety_fraction: f64,
    /// Cross-class suppression overlap.
    pub nms_iou: f64,
    /// Minimum F-measure gain for adding another object-layer composition.
    pub f_gain_floor: f64,
    /// Object-layer candidates evaluated as detectors, best coverage first.
    pub object_candidates: usize,
    /// Box overlap that makes a detection positive.
    pub positive_iou: f64,
}

impl Default for MulticlassConfig {
    fn default() -> Self {
        MulticlassConfig {
            object_diagonal: 250.0,
            box_margin: 0.1,
            safety_fraction: 0.9,
            nms_iou: 0.5,
            f_gain_floor: 0.01,
            object_candidates: 40,
            positive_iou: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub fppi: f64,
    pub box_padding: f64,
    pub classification_layer: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_threshold: 0.5,
            fppi: 0.4,
            box_padding: 2.0,
            classification_layer: 3,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let c = Config::synthetic();
        let back: Config = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        back.validate().unwrap();
    }

    #[test]
    fn partial_file_uses_defaults() {
        let c: Config = toml::from_str("seed = 7\n[inference]\ntau = 0.1\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.inference.tau, 0.1);
        assert_eq!(c.layers.object_layer, 6);
    }

    #[test]
    fn radii_schedule() {
        let l = LayerConfig::default();
        let r: Vec<u32> = (2..=6).map(|i| l.radius(i)).collect();
        assert_eq!(r, vec![8, 12, 12, 12, 15]);
        assert_eq!(l.rho(1), 1.0);
        assert_eq!(l.rho(4), 0.5);
    }

    #[test]
    fn invalid_gabor_rejected() {
        let mut c = Config::default();
        c.features.gabor.orientations = 1;
        assert!(c.validate().is_err());
    }
}
