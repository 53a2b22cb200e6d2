use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::overlap;
use crate::config::LearningConfig;
use crate::geometry::Gaussian2;
use crate::inference::InferenceGraph;

/// Co-occurrence counts of OR `other` at offsets from OR `reference`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairHistogram {
    pub reference: u32,
    pub other: u32,
    pub radius: u32,
    /// Row-major `(2r+1)^2` grid; cell `(r, r)` is offset zero.
    pub counts: Vec<u64>,
}

impl PairHistogram {
    pub fn new(reference: u32, other: u32, radius: u32) -> Self {
        let side = 2 * radius as usize + 1;
        PairHistogram {
            reference,
            other,
            radius,
            counts: vec![0; side * side],
        }
    }

    pub fn side(&self) -> usize {
        2 * self.radius as usize + 1
    }

    fn cell(&self, d: [i32; 2]) -> Option<usize> {
        let r = self.radius as i32;
        if d[0].abs() > r || d[1].abs() > r {
            return None;
        }
        Some(((d[1] + r) as usize) * self.side() + (d[0] + r) as usize)
    }

    pub fn get(&self, d: [i32; 2]) -> u64 {
        self.cell(d).map(|c| self.counts[c]).unwrap_or(0)
    }

    pub fn add(&mut self, d: [i32; 2], n: u64) {
        if let Some(c) = self.cell(d) {
            self.counts[c] += n;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn merge(&mut self, other: &PairHistogram) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }
}

pub type Histograms = BTreeMap<(u32, u32), PairHistogram>;

/// Pairwise offset histograms over the OR states of layer `below` of every
/// graph: each ordered pair within Euclidean distance `radius` whose
/// supports overlap less than `max_overlap` counts once.
pub fn accumulate_histograms(
    graphs: &[&InferenceGraph],
    below: usize,
    radius: u32,
    max_overlap: f64,
) -> Histograms {
    let partials: Vec<Histograms> = graphs
        .par_iter()
        .map(|g| {
            let mut h = Histograms::new();
            if g.depth() < below {
                return h;
            }
            let layer = g.layer(below);
            let r = radius as i32;
            let r2 = r * r;
            for a in &layer.ors {
                for (_, bi) in layer.index.in_square(a.loc[0], a.loc[1], r) {
                    let b = &layer.ors[bi as usize];
                    let d = [b.loc[0] - a.loc[0], b.loc[1] - a.loc[1]];
                    if d[0] * d[0] + d[1] * d[1] > r2 || std::ptr::eq(a, b) {
                        continue;
                    }
                    if overlap(&a.support, &b.support) >= max_overlap {
                        continue;
                    }
                    h.entry((a.id, b.id))
                        .or_insert_with(|| PairHistogram::new(a.id, b.id, radius))
                        .add(d, 1);
                }
            }
            h
        })
        .collect();
    let mut out = Histograms::new();
    for part in partials {
        for (k, v) in part {
            match out.get_mut(&k) {
                Some(h) => h.merge(&v),
                None => {
                    out.insert(k, v);
                }
            }
        }
    }
    out
}

fn smooth_binomial(values: &[f64], side: usize) -> Vec<f64> {
    let k = [0.25, 0.5, 0.25];
    let mut tmp = vec![0.0; values.len()];
    for y in 0..side {
        for x in 0..side {
            let mut s = 0.0;
            for (i, w) in k.iter().enumerate() {
                let xx = x as isize + i as isize - 1;
                if xx >= 0 && (xx as usize) < side {
                    s += w * values[y * side + xx as usize];
                }
            }
            tmp[y * side + x] = s;
        }
    }
    let mut out = vec![0.0; values.len()];
    for y in 0..side {
        for x in 0..side {
            let mut s = 0.0;
            for (i, w) in k.iter().enumerate() {
                let yy = y as isize + i as isize - 1;
                if yy >= 0 && (yy as usize) < side {
                    s += w * tmp[yy as usize * side + x];
                }
            }
            out[y * side + x] = s;
        }
    }
    out
}

/// Modes of a histogram as Gaussians over offsets.
///
/// A cell is a mode when it is the maximum of its `mode_window` square
/// (earlier cells win ties), and the window holds at least
/// `mode_mass_floor` of the total mass. Histograms of layers above
/// `smooth_above_layer` are smoothed with a 3x3 binomial first. Each mode is
/// fitted by weighted moments of the raw counts in its window, with the
/// covariance eigenvalues floored at `geometry_floor`.
pub fn find_modes(hist: &PairHistogram, layer: usize, cfg: &LearningConfig) -> Vec<Gaussian2> {
    let side = hist.side();
    let raw: Vec<f64> = hist.counts.iter().map(|&c| c as f64).collect();
    let values = if layer > cfg.smooth_above_layer {
        smooth_binomial(&raw, side)
    } else {
        raw.clone()
    };
    let total: f64 = values.iter().sum();
    if total <= 0.0 {
        return Vec::new();
    }
    let half = (cfg.mode_window / 2) as isize;
    let r = hist.radius as f64;
    let mut modes = Vec::new();
    for y in 0..side as isize {
        for x in 0..side as isize {
            let c = (y as usize) * side + x as usize;
            let v = values[c];
            if v <= 0.0 {
                continue;
            }
            let mut is_max = true;
            let mut mass = 0.0;
            let mut samples = Vec::new();
            for yy in (y - half).max(0)..=(y + half).min(side as isize - 1) {
                for xx in (x - half).max(0)..=(x + half).min(side as isize - 1) {
                    let q = (yy as usize) * side + xx as usize;
                    let w = values[q];
                    mass += w;
                    if q != c && (w > v || (w == v && q < c)) {
                        is_max = false;
                    }
                    if raw[q] > 0.0 {
                        samples.push(([xx as f64 - r, yy as f64 - r], raw[q]));
                    }
                }
            }
            if !is_max || mass < cfg.mode_mass_floor * total {
                continue;
            }
            if let Some(mut g) = Gaussian2::fit_weighted(&samples, cfg.geometry_floor) {
                let n = g.mean[0].hypot(g.mean[1]);
                if n > r {
                    g.mean = [g.mean[0] * r / n, g.mean[1] * r / n];
                }
                modes.push(g);
            }
        }
    }
    modes
}

/// Two-part relation extracted from one histogram mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Duplet {
    pub id: u32,
    pub reference: u32,
    pub other: u32,
    pub geometry: Gaussian2,
}

/// Duplets of every histogram, in canonical order (reference, other, mean
/// row-major) with ids equal to positions.
pub fn extract_duplets(hists: &Histograms, layer: usize, cfg: &LearningConfig) -> Vec<Duplet> {
    let per: Vec<Vec<Duplet>> = hists
        .par_iter()
        .map(|(&(i, j), h)| {
            find_modes(h, layer, cfg)
                .into_iter()
                .map(|g| Duplet {
                    id: 0,
                    reference: i,
                    other: j,
                    geometry: g,
                })
                .collect()
        })
        .collect();
    let mut all: Vec<Duplet> = per.into_iter().flatten().collect();
    all.sort_by(|a, b| {
        (a.reference, a.other)
            .cmp(&(b.reference, b.other))
            .then(a.geometry.mean[1].total_cmp(&b.geometry.mean[1]))
            .then(a.geometry.mean[0].total_cmp(&b.geometry.mean[0]))
    });
    for (k, d) in all.iter_mut().enumerate() {
        d.id = k as u32;
    }
    all
}
