use std::f64::consts::PI;

use crate::config::GaborBankConfig;
use crate::error::Result;

/// Truncated envelope mass tolerated when choosing the kernel support.
pub const MAX_TRUNCATED_MASS: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Cosine carrier, phase offset 0.
    Even,
    /// Sine carrier, phase offset -pi/2.
    Odd,
}

impl Phase {
    pub fn offset(self) -> f64 {
        match self {
            Phase::Even => 0.0,
            Phase::Odd => -PI / 2.0,
        }
    }
}

/// One square Gabor kernel sampled on `(2r+1)^2` integer offsets, row-major
/// with `dy` outer.
#[derive(Debug, Clone)]
pub struct GaborKernel {
    pub orientation: f64,
    pub phase: Phase,
    pub radius: usize,
    pub values: Vec<f64>,
}

impl GaborKernel {
    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    /// Value at integer offset `(dx, dy)` from the kernel center.
    pub fn at(&self, dx: isize, dy: isize) -> f64 {
        let r = self.radius as isize;
        self.values[((dy + r) * (2 * r + 1) + dx + r) as usize]
    }
}

/// Even and odd kernels for each of `n` equidistant orientations, stored as
/// `[even_0, odd_0, even_1, odd_1, ...]`.
#[derive(Debug, Clone)]
pub struct GaborBank {
    pub config: GaborBankConfig,
    pub radius: usize,
    pub kernels: Vec<GaborKernel>,
}

impl GaborBank {
    pub fn orientations(&self) -> usize {
        self.config.orientations
    }

    pub fn support(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn even(&self, i: usize) -> &GaborKernel {
        &self.kernels[2 * i]
    }

    pub fn odd(&self, i: usize) -> &GaborKernel {
        &self.kernels[2 * i + 1]
    }

    /// Orientation angle of filter `i`, `i * pi / n`.
    pub fn angle(&self, i: usize) -> f64 {
        i as f64 * PI / self.config.orientations as f64
    }
}

fn envelope(c: &GaborBankConfig, psi: f64, x: f64, y: f64) -> f64 {
    let (u, v) = rotate(psi, x, y);
    (-(u * u + c.aspect * c.aspect * v * v) / (2.0 * c.sigma * c.sigma)).exp()
}

#[inline]
fn rotate(psi: f64, x: f64, y: f64) -> (f64, f64) {
    let (s, c) = psi.sin_cos();
    (x * c - y * s, x * s + y * c)
}

/// Fraction of the discrete envelope mass falling outside the square of
/// half-width `radius`, worst case over the bank's orientations.
pub fn truncated_mass(c: &GaborBankConfig, radius: usize) -> f64 {
    let far = (10.0 * c.sigma / c.aspect.min(1.0)).ceil() as isize + radius as isize;
    let r = radius as isize;
    (0..c.orientations)
        .map(|i| {
            let psi = i as f64 * PI / c.orientations as f64;
            let mut total = 0.0;
            let mut inside = 0.0;
            for y in -far..=far {
                for x in -far..=far {
                    let e = envelope(c, psi, x as f64, y as f64);
                    total += e;
                    if x.abs() <= r && y.abs() <= r {
                        inside += e;
                    }
                }
            }
            1.0 - inside / total
        })
        .fold(0.0, f64::max)
}

/// Kernel half-width: starts from `ceil(3 sigma / min(1, gamma))` and grows
/// until the truncated envelope mass drops below [`MAX_TRUNCATED_MASS`].
pub fn kernel_radius(c: &GaborBankConfig) -> usize {
    let mut r = (3.0 * c.sigma / c.aspect.min(1.0)).ceil() as usize;
    while truncated_mass(c, r) >= MAX_TRUNCATED_MASS {
        r += 1;
    }
    r
}

pub fn build_gabor_bank(config: &GaborBankConfig) -> Result<GaborBank> {
    config.validate()?;
    let radius = kernel_radius(config);
    let r = radius as isize;
    let mut kernels = Vec::with_capacity(2 * config.orientations);
    for i in 0..config.orientations {
        let psi = i as f64 * PI / config.orientations as f64;
        for phase in [Phase::Even, Phase::Odd] {
            let mut values = Vec::with_capacity((2 * radius + 1).pow(2));
            let mut env = Vec::with_capacity(values.capacity());
            for dy in -r..=r {
                for dx in -r..=r {
                    let (x, y) = (dx as f64, dy as f64);
                    let (u, _) = rotate(psi, x, y);
                    let e = envelope(config, psi, x, y);
                    env.push(e);
                    values.push(e * (2.0 * PI * u / config.wavelength + phase.offset()).cos());
                }
            }
            // remove the DC response under the envelope so flat regions give 0
            let dc = values.iter().sum::<f64>() / env.iter().sum::<f64>();
            for (v, e) in values.iter_mut().zip(&env) {
                *v -= dc * e;
            }
            kernels.push(GaborKernel {
                orientation: psi,
                phase,
                radius,
                values,
            });
        }
    }
    Ok(GaborBank {
        config: *config,
        radius,
        kernels,
    })
}
