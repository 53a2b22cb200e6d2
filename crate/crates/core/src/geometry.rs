//! Two-dimensional Gaussians for part placement and axis-aligned boxes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Spatial relation of a part relative to its composition's reference part,
/// in grid units of the layer below.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gaussian2 {
    pub mean: [f64; 2],
    /// Symmetric covariance `[[sxx, sxy], [sxy, syy]]`.
    pub cov: [[f64; 2]; 2],
}

impl Gaussian2 {
    pub fn new(mean: [f64; 2], cov: [[f64; 2]; 2]) -> Result<Self> {
        let g = Gaussian2 { mean, cov };
        if g.is_positive_definite() {
            Ok(g)
        } else {
            Err(Error::SingularCovariance)
        }
    }

    pub fn isotropic(mean: [f64; 2], variance: f64) -> Self {
        Gaussian2 {
            mean,
            cov: [[variance, 0.0], [0.0, variance]],
        }
    }

    pub fn determinant(&self) -> f64 {
        self.cov[0][0] * self.cov[1][1] - self.cov[0][1] * self.cov[1][0]
    }

    pub fn is_positive_definite(&self) -> bool {
        let c = &self.cov;
        c[0][0].is_finite()
            && c[1][1].is_finite()
            && c[0][1].is_finite()
            && (c[0][1] - c[1][0]).abs() <= 1e-12 * (1.0 + c[0][1].abs())
            && c[0][0] > 0.0
            && self.determinant() > 0.0
    }

    /// Eigenvalues of the covariance, smallest first.
    pub fn eigenvalues(&self) -> (f64, f64) {
        sym_eigen(self.cov).0
    }

    pub fn precision(&self) -> Result<[[f64; 2]; 2]> {
        if !self.is_positive_definite() {
            return Err(Error::SingularCovariance);
        }
        let det = self.determinant();
        let c = &self.cov;
        Ok([[c[1][1] / det, -c[0][1] / det], [-c[1][0] / det, c[0][0] / det]])
    }

    /// Squared Mahalanobis distance of `x` from the mean.
    pub fn mahalanobis2(&self, x: [f64; 2]) -> Result<f64> {
        let p = self.precision()?;
        Ok(quad(&p, [x[0] - self.mean[0], x[1] - self.mean[1]]))
    }

    /// Unnormalized Gaussian `exp(-0.5 (x-mu)^T Sigma^-1 (x-mu))`.
    pub fn deformation(&self, x: [f64; 2]) -> Result<f64> {
        Ok((-0.5 * self.mahalanobis2(x)?).exp())
    }

    /// Integer offsets whose squared Mahalanobis distance from the mean is at
    /// most `max_m2`, with their deformation scores.
    pub fn window(&self, max_m2: f64) -> Result<Vec<([i32; 2], f64)>> {
        let p = self.precision()?;
        let (_, vmax) = self.eigenvalues();
        let reach = (max_m2 * vmax).sqrt().ceil() as i32 + 1;
        let cx = self.mean[0].round() as i32;
        let cy = self.mean[1].round() as i32;
        let mut out = Vec::new();
        for dy in (cy - reach)..=(cy + reach) {
            for dx in (cx - reach)..=(cx + reach) {
                let m2 = quad(&p, [dx as f64 - self.mean[0], dy as f64 - self.mean[1]]);
                if m2 <= max_m2 {
                    out.push(([dx, dy], (-0.5 * m2).exp()));
                }
            }
        }
        Ok(out)
    }

    /// Clamp covariance eigenvalues from below, keeping eigenvectors.
    pub fn with_floor(mut self, floor: f64) -> Self {
        self.cov = floor_cov(self.cov, floor);
        self
    }

    /// Maximum-likelihood fit to weighted samples, covariance floored at `floor`.
    /// Returns `None` when the total weight is zero.
    pub fn fit_weighted(samples: &[([f64; 2], f64)], floor: f64) -> Option<Self> {
        let total: f64 = samples.iter().map(|s| s.1).sum();
        if total <= 0.0 {
            return None;
        }
        let mut mean = [0.0; 2];
        for (x, w) in samples {
            mean[0] += w * x[0];
            mean[1] += w * x[1];
        }
        mean[0] /= total;
        mean[1] /= total;
        let mut cov = [[0.0; 2]; 2];
        for (x, w) in samples {
            let d = [x[0] - mean[0], x[1] - mean[1]];
            cov[0][0] += w * d[0] * d[0];
            cov[0][1] += w * d[0] * d[1];
            cov[1][1] += w * d[1] * d[1];
        }
        cov[0][0] /= total;
        cov[0][1] /= total;
        cov[1][1] /= total;
        cov[1][0] = cov[0][1];
        Some(Gaussian2 {
            mean,
            cov: floor_cov(cov, floor),
        })
    }
}

#[inline]
fn quad(p: &[[f64; 2]; 2], d: [f64; 2]) -> f64 {
    d[0] * (p[0][0] * d[0] + p[0][1] * d[1]) + d[1] * (p[1][0] * d[0] + p[1][1] * d[1])
}

/// Eigen-decomposition of a symmetric 2x2 matrix: eigenvalues (ascending) and
/// the unit eigenvector of the larger one.
fn sym_eigen(c: [[f64; 2]; 2]) -> ((f64, f64), [f64; 2]) {
    let a = c[0][0];
    let b = 0.5 * (c[0][1] + c[1][0]);
    let d = c[1][1];
    let tr = 0.5 * (a + d);
    let disc = (0.25 * (a - d) * (a - d) + b * b).sqrt();
    let hi = tr + disc;
    let lo = tr - disc;
    let v = if b.abs() > 1e-15 {
        let v = [hi - d, b];
        let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
        [v[0] / n, v[1] / n]
    } else if a >= d {
        [1.0, 0.0]
    } else {
        [0.0, 1.0]
    };
    ((lo, hi), v)
}

fn floor_cov(c: [[f64; 2]; 2], floor: f64) -> [[f64; 2]; 2] {
    let ((lo, hi), v) = sym_eigen(c);
    let lo = lo.max(floor);
    let hi = hi.max(floor);
    // c = hi v v^T + lo w w^T with w orthogonal to v
    let w = [-v[1], v[0]];
    let xy = hi * v[0] * v[1] + lo * w[0] * w[1];
    [
        [hi * v[0] * v[0] + lo * w[0] * w[0], xy],
        [xy, hi * v[1] * v[1] + lo * w[1] * w[1]],
    ]
}

/// Axis-aligned rectangle in continuous pixel coordinates (`x1 >= x0`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BBox { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> f64 {
        (self.x1 - self.x0).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y1 - self.y0).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn diagonal(&self) -> f64 {
        self.width().hypot(self.height())
    }

    pub fn center(&self) -> [f64; 2] {
        [0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1)]
    }

    pub fn scaled(&self, s: f64) -> BBox {
        BBox::new(self.x0 * s, self.y0 * s, self.x1 * s, self.y1 * s)
    }

    pub fn translated(&self, dx: f64, dy: f64) -> BBox {
        BBox::new(self.x0 + dx, self.y0 + dy, self.x1 + dx, self.y1 + dy)
    }

    pub fn padded(&self, p: f64) -> BBox {
        BBox::new(self.x0 - p, self.y0 - p, self.x1 + p, self.y1 + p)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }

    /// Smallest box containing all points; `None` for an empty iterator.
    pub fn enclosing(points: impl IntoIterator<Item = [f64; 2]>) -> Option<BBox> {
        let mut it = points.into_iter();
        let first = it.next()?;
        let mut b = BBox::new(first[0], first[1], first[0], first[1]);
        for p in it {
            b.x0 = b.x0.min(p[0]);
            b.y0 = b.y0.min(p[1]);
            b.x1 = b.x1.max(p[0]);
            b.y1 = b.y1.max(p[1]);
        }
        Some(b)
    }
}

/// Intersection over union; zero when either box is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = BBox::new(a.x0.max(b.x0), a.y0.max(b.y0), a.x1.min(b.x1), a.y1.min(b.y1)).area();
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}
