use crate::config::PyramidConfig;
use crate::raster::Plane;

#[derive(Debug, Clone)]
pub struct PyramidLevel {
    pub image: Plane,
    /// Level size over base size, per axis.
    pub scale_x: f64,
    pub scale_y: f64,
}

/// Gaussian pyramid with `scales_per_octave` levels per halving. Level `k`
/// has size `round(base / 2^(k / s))` and is produced from level `k - 1` by a
/// blur of `blur_factor * 2^(1/s)` followed by resampling. Construction stops
/// after `levels` levels or before the short side drops under `min_size`.
pub fn build_pyramid(image: &Plane, config: &PyramidConfig) -> Vec<PyramidLevel> {
    let s = config.scales_per_octave.max(1) as f64;
    let ratio = 2f64.powf(1.0 / s);
    let (w0, h0) = (image.width(), image.height());
    let mut levels = vec![PyramidLevel {
        image: image.clone(),
        scale_x: 1.0,
        scale_y: 1.0,
    }];
    for k in 1..config.levels {
        let f = ratio.powi(k as i32);
        let w = (w0 as f64 / f).round() as usize;
        let h = (h0 as f64 / f).round() as usize;
        if w.min(h) < config.min_size {
            break;
        }
        let prev = &levels[k - 1].image;
        let next = prev
            .gaussian_blur((config.blur_factor * ratio) as f32)
            .resize(w, h);
        levels.push(PyramidLevel {
            image: next,
            scale_x: w as f64 / w0 as f64,
            scale_y: h as f64 / h0 as f64,
        });
    }
    levels
}

/// Resize by a constant factor (test-time upscaling).
pub fn rescale(image: &Plane, factor: f64) -> Plane {
    if (factor - 1.0).abs() < 1e-12 {
        return image.clone();
    }
    let w = ((image.width() as f64) * factor).round().max(1.0) as usize;
    let h = ((image.height() as f64) * factor).round().max(1.0) as usize;
    let src = if factor < 1.0 {
        image.gaussian_blur((0.5 / factor) as f32)
    } else {
        image.clone()
    };
    src.resize(w, h)
}
