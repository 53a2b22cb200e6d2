use serde::{Deserialize, Serialize};

use super::energy::{orientation_energy, EnergyVolume};
use super::gabor::GaborBank;
use crate::error::Result;
use crate::raster::Plane;

/// Edge observation: location plus the energy of every orientation there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrientedFeature {
    pub x: u32,
    pub y: u32,
    pub energies: Vec<f32>,
    pub dominant: u8,
}

impl OrientedFeature {
    /// Energies scaled so the dominant entry equals 1.
    pub fn normalized(&self) -> Vec<f64> {
        let m = self.energies[self.dominant as usize] as f64;
        if m <= 0.0 {
            return vec![0.0; self.energies.len()];
        }
        self.energies.iter().map(|&e| e as f64 / m).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSet {
    pub width: usize,
    pub height: usize,
    pub orientations: usize,
    pub scale_index: usize,
    pub features: Vec<OrientedFeature>,
}

impl FeatureSet {
    pub fn empty(width: usize, height: usize, orientations: usize) -> Self {
        FeatureSet {
            width,
            height,
            orientations,
            scale_index: 0,
            features: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

/// Index of the largest energy, lowest index on ties.
pub fn argmax(energies: &[f32]) -> usize {
    let mut best = 0;
    for (i, &e) in energies.iter().enumerate() {
        if e > energies[best] {
            best = i;
        }
    }
    best
}

/// Pixel step along the edge normal of orientation `o` (of `n`), quantized
/// to the 8-neighborhood. Filter `o` varies along `(cos psi, -sin psi)`.
pub fn normal_step(o: usize, n: usize) -> (isize, isize) {
    let psi = o as f64 * std::f64::consts::PI / n as f64;
    let angle = (-psi.sin()).atan2(psi.cos());
    let k = (angle / std::f64::consts::FRAC_PI_4).round() as i32;
    match k.rem_euclid(8) {
        0 => (1, 0),
        1 => (1, 1),
        2 => (0, 1),
        3 => (-1, 1),
        4 => (-1, 0),
        5 => (-1, -1),
        6 => (0, -1),
        _ => (1, -1),
    }
}

/// Suppression on an energy volume: a pixel survives when its dominant
/// energy is at least `min_energy`, not below the neighbor ahead along the
/// dominant orientation's normal and strictly above the one behind. Pixels
/// within `margin` of the border are skipped.
pub fn suppress(volume: &EnergyVolume, min_energy: f32, margin: usize) -> Vec<OrientedFeature> {
    let (w, h, n) = (volume.width(), volume.height(), volume.orientations());
    let mut out = Vec::new();
    if w <= 2 * margin || h <= 2 * margin {
        return out;
    }
    let steps: Vec<(isize, isize)> = (0..n).map(|o| normal_step(o, n)).collect();
    let mut energies = vec![0.0f32; n];
    for y in margin..h - margin {
        for x in margin..w - margin {
            for (o, e) in energies.iter_mut().enumerate() {
                *e = volume.get(x, y, o);
            }
            let d = argmax(&energies);
            let e = energies[d];
            if e < min_energy || e <= 0.0 {
                continue;
            }
            let (sx, sy) = steps[d];
            let ahead = volume.get((x as isize + sx) as usize, (y as isize + sy) as usize, d);
            let behind = volume.get((x as isize - sx) as usize, (y as isize - sy) as usize, d);
            if e >= ahead && e > behind {
                out.push(OrientedFeature {
                    x: x as u32,
                    y: y as u32,
                    energies: energies.clone(),
                    dominant: d as u8,
                });
            }
        }
    }
    out
}

/// Oriented edge features of one image at one scale.
pub fn extract_features(image: &Plane, bank: &GaborBank, min_energy: f32) -> Result<FeatureSet> {
    let volume = orientation_energy(image, bank)?;
    // one extra pixel so the suppression neighbors stay inside the image
    let features = suppress(&volume, min_energy, bank.radius + 1);
    Ok(FeatureSet {
        width: image.width(),
        height: image.height(),
        orientations: bank.orientations(),
        scale_index: 0,
        features,
    })
}
