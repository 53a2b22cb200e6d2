use std::path::Path;

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::gabor::GaborBank;
use crate::error::{Error, Result};
use crate::raster::Plane;

/// Energies below this are treated as an edge-free image.
const FLAT_ENERGY: f64 = 1e-9;

/// Per-orientation total Gabor energy, normalized so the volume maximum is 1.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyVolume {
    width: usize,
    height: usize,
    orientations: usize,
    /// Layout `[orientation][y][x]`.
    values: Vec<f32>,
}

impl EnergyVolume {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn orientations(&self) -> usize {
        self.orientations
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, o: usize) -> f32 {
        self.values[(o * self.height + y) * self.width + x]
    }

    pub fn max(&self) -> f32 {
        self.values.iter().copied().fold(0.0, f32::max)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// One orientation slice as a raster.
    pub fn layer(&self, o: usize) -> Plane {
        let n = self.width * self.height;
        Plane::from_vec(self.width, self.height, self.values[o * n..(o + 1) * n].to_vec())
    }

    /// Write each orientation as `energy_<o>.png` into `dir`.
    pub fn save_layers(&self, dir: impl AsRef<Path>) -> Result<()> {
        std::fs::create_dir_all(dir.as_ref())?;
        for o in 0..self.orientations {
            self.layer(o)
                .save(dir.as_ref().join(format!("energy_{o}.png")))?;
        }
        Ok(())
    }
}

/// Total energy `sqrt(r_even^2 + r_odd^2)` per orientation, computed by FFT
/// correlation over a reflect-padded image, then normalized to a maximum of 1.
pub fn orientation_energy(image: &Plane, bank: &GaborBank) -> Result<EnergyVolume> {
    let raw = raw_energy(image, bank)?;
    Ok(normalize(image.width(), image.height(), bank.orientations(), raw))
}

pub(crate) fn check_size(image: &Plane, bank: &GaborBank) -> Result<()> {
    let support = bank.support();
    if image.width() < support || image.height() < support {
        return Err(Error::ImageTooSmall {
            width: image.width(),
            height: image.height(),
            support,
        });
    }
    Ok(())
}

pub(crate) fn normalize(
    width: usize,
    height: usize,
    orientations: usize,
    raw: Vec<Vec<f64>>,
) -> EnergyVolume {
    let max = raw.iter().flatten().copied().fold(0.0, f64::max);
    let values = if max <= FLAT_ENERGY {
        vec![0.0; width * height * orientations]
    } else {
        raw.into_iter()
            .flatten()
            .map(|v| (v / max) as f32)
            .collect()
    };
    EnergyVolume {
        width,
        height,
        orientations,
        values,
    }
}

/// Unnormalized energies, one `width * height` buffer per orientation.
fn raw_energy(image: &Plane, bank: &GaborBank) -> Result<Vec<Vec<f64>>> {
    check_size(image, bank)?;
    let (w, h) = (image.width(), image.height());
    let r = bank.radius;
    let pw = smooth_size(w + 2 * r);
    let ph = smooth_size(h + 2 * r);

    let mut planner = FftPlanner::<f64>::new();
    let row_fwd = planner.plan_fft_forward(pw);
    let col_fwd = planner.plan_fft_forward(ph);
    let row_inv = planner.plan_fft_inverse(pw);
    let col_inv = planner.plan_fft_inverse(ph);
    let fft2 = |buf: &mut Vec<Complex64>, inverse: bool| {
        let (rows, cols) = if inverse {
            (&row_inv, &col_inv)
        } else {
            (&row_fwd, &col_fwd)
        };
        for row in buf.chunks_exact_mut(pw) {
            rows.process(row);
        }
        let mut column = vec![Complex64::default(); ph];
        for x in 0..pw {
            for y in 0..ph {
                column[y] = buf[y * pw + x];
            }
            cols.process(&mut column);
            for y in 0..ph {
                buf[y * pw + x] = column[y];
            }
        }
    };

    let mut padded = vec![Complex64::default(); pw * ph];
    for y in 0..h + 2 * r {
        for x in 0..w + 2 * r {
            let v = image.get_reflect(x as isize - r as isize, y as isize - r as isize);
            padded[y * pw + x] = Complex64::new(v as f64, 0.0);
        }
    }
    fft2(&mut padded, false);

    let scale = 1.0 / (pw * ph) as f64;
    let ri = r as isize;
    let out: Vec<Vec<f64>> = (0..bank.orientations())
        .into_par_iter()
        .map(|o| {
            let even = bank.even(o);
            let odd = bank.odd(o);
            // correlation: kernel value k(d) goes to index -d (mod size)
            let mut kern = vec![Complex64::default(); pw * ph];
            for dy in -ri..=ri {
                for dx in -ri..=ri {
                    let ix = (-dx).rem_euclid(pw as isize) as usize;
                    let iy = (-dy).rem_euclid(ph as isize) as usize;
                    kern[iy * pw + ix] = Complex64::new(even.at(dx, dy), odd.at(dx, dy));
                }
            }
            fft2(&mut kern, false);
            for (k, p) in kern.iter_mut().zip(&padded) {
                *k *= p;
            }
            fft2(&mut kern, true);
            let mut e = Vec::with_capacity(w * h);
            for y in 0..h {
                for x in 0..w {
                    e.push(kern[(y + r) * pw + x + r].norm() * scale);
                }
            }
            e
        })
        .collect();
    Ok(out)
}

/// Smallest integer >= n whose only prime factors are 2, 3 and 5.
fn smooth_size(n: usize) -> usize {
    (n..)
        .find(|&m| {
            let mut m = m;
            for p in [2, 3, 5] {
                while m % p == 0 {
                    m /= p;
                }
            }
            m == 1
        })
        .expect("unbounded search")
}
