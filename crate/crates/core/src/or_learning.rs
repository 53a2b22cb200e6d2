//! Grouping compositions with similar shape into OR nodes.
//!
//! Each composition is described by the Shape Context of its typical
//! support; compositions are clustered by average linkage on the
//! chi-square distance between descriptors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::InferenceGraph;
use crate::vocabulary::{OrComposition, Vocabulary};

/// Log-polar histogram of point offsets, L1-normalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeContext {
    pub radial: usize,
    pub angular: usize,
    /// `radial * angular` bins, radial-major.
    pub bins: Vec<f64>,
}

/// Shape Context of a point set accumulated over every point as center.
///
/// Distances are divided by the mean pairwise distance; radial bin edges
/// are log-spaced from 1/8 to 2, and closer or farther points fall into the
/// first or last ring.
pub fn shape_context(points: &[[f64; 2]], radial: usize, angular: usize) -> Result<ShapeContext> {
    let mut pts: Vec<[f64; 2]> = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 2 {
        return Err(Error::DegenerateSupport);
    }
    let n = pts.len();
    let mut total = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            total += (pts[i][0] - pts[j][0]).hypot(pts[i][1] - pts[j][1]);
        }
    }
    let mean = total / (n * (n - 1) / 2) as f64;
    let (lo, hi) = ((1.0f64 / 8.0).ln(), 2.0f64.ln());
    let mut bins = vec![0.0; radial * angular];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let dx = pts[j][0] - pts[i][0];
            let dy = pts[j][1] - pts[i][1];
            let r = (dx.hypot(dy) / mean).ln();
            let rb = (((r - lo) / (hi - lo) * radial as f64).floor() as isize).clamp(0, radial as isize - 1);
            let theta = dy.atan2(dx).rem_euclid(std::f64::consts::TAU);
            let ab = ((theta / std::f64::consts::TAU * angular as f64) as usize).min(angular - 1);
            bins[rb as usize * angular + ab] += 1.0;
        }
    }
    let sum: f64 = bins.iter().sum();
    for b in &mut bins {
        *b /= sum;
    }
    Ok(ShapeContext { radial, angular, bins })
}

/// `0.5 * sum (a - b)^2 / (a + b)` over bins with `a + b > 0`.
pub fn chi2(a: &ShapeContext, b: &ShapeContext) -> Result<f64> {
    if (a.radial, a.angular) != (b.radial, b.angular) {
        return Err(Error::BinningMismatch((a.radial, a.angular), (b.radial, b.angular)));
    }
    Ok(a
        .bins
        .iter()
        .zip(&b.bins)
        .filter(|(x, y)| **x + **y > 0.0)
        .map(|(x, y)| (x - y) * (x - y) / (x + y))
        .sum::<f64>()
        * 0.5)
}

/// Average-linkage agglomerative clustering of a symmetric distance matrix.
/// Clusters merge while their average distance is at most `cutoff`; the
/// closest pair merges first (lowest indices on ties). Clusters come back
/// sorted by their smallest member, members ascending.
pub fn average_linkage(dist: &[Vec<f64>], cutoff: f64) -> Vec<Vec<usize>> {
    let n = dist.len();
    let mut clusters: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    // summed pairwise distances between clusters
    let mut sums: Vec<Vec<f64>> = dist.to_vec();
    let mut alive = vec![true; n];
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..n {
            if !alive[i] {
                continue;
            }
            for j in (i + 1)..n {
                if !alive[j] {
                    continue;
                }
                let d = sums[i][j] / (clusters[i].len() * clusters[j].len()) as f64;
                if best.is_none_or(|b| d < b.0) {
                    best = Some((d, i, j));
                }
            }
        }
        let Some((d, i, j)) = best else { break };
        if d > cutoff {
            break;
        }
        let moved = std::mem::take(&mut clusters[j]);
        clusters[i].extend(moved);
        alive[j] = false;
        for k in 0..n {
            if alive[k] && k != i {
                let s = sums[i][k] + sums[j][k];
                sums[i][k] = s;
                sums[k][i] = s;
            }
        }
    }
    let mut out: Vec<Vec<usize>> = clusters
        .into_iter()
        .zip(alive)
        .filter(|(_, a)| *a)
        .map(|(mut c, _)| {
            c.sort_unstable();
            c
        })
        .collect();
    out.sort();
    out
}

/// Prototype shape of every composition of layer `l`: support points of its
/// `samples` best-scoring states in `graphs`, each centered on its state's
/// support centroid. `None` for compositions that never fire.
pub fn prototypes(
    vocab: &Vocabulary,
    graphs: &[&InferenceGraph],
    l: usize,
    samples: usize,
) -> Vec<Option<Vec<[f64; 2]>>> {
    let n = vocab.layer(l).compositions.len();
    let mut best: Vec<Vec<(f64, usize, usize)>> = vec![Vec::new(); n];
    for (gi, g) in graphs.iter().enumerate() {
        if g.depth() < l {
            continue;
        }
        for (si, s) in g.layer(l).comps.iter().enumerate() {
            best[s.id as usize].push((s.score, gi, si));
        }
    }
    best.into_iter()
        .map(|mut list| {
            if list.is_empty() {
                return None;
            }
            list.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            list.truncate(samples);
            let mut pts = Vec::new();
            for (_, gi, si) in list {
                let g = graphs[gi];
                let sup = &g.layer(l).comps[si].support;
                let p: Vec<[f64; 2]> = sup
                    .iter()
                    .map(|&i| {
                        let q = g.points[i as usize];
                        [q[0] as f64, q[1] as f64]
                    })
                    .collect();
                if p.is_empty() {
                    continue;
                }
                let c = [
                    p.iter().map(|q| q[0]).sum::<f64>() / p.len() as f64,
                    p.iter().map(|q| q[1]).sum::<f64>() / p.len() as f64,
                ];
                pts.extend(p.into_iter().map(|q| [q[0] - c[0], q[1] - c[1]]));
            }
            Some(pts)
        })
        .collect()
}

/// Regroup compositions of layer `l` with ids `>= first_new` into OR nodes
/// appended after the existing ones. Compositions whose prototype is
/// degenerate stay singletons. Returns the number of OR nodes added.
pub fn learn_or_nodes(
    vocab: &mut Vocabulary,
    graphs: &[&InferenceGraph],
    l: usize,
    first_new: u32,
    radial: usize,
    angular: usize,
    cutoff: f64,
    samples: usize,
) -> Result<usize> {
    let protos = prototypes(vocab, graphs, l, samples);
    let layer = vocab.layer(l);
    let new: Vec<u32> = layer
        .compositions
        .iter()
        .map(|c| c.id)
        .filter(|&id| id >= first_new)
        .collect();
    let mut descs: Vec<(u32, ShapeContext)> = Vec::new();
    let mut singles: Vec<u32> = Vec::new();
    for &id in &new {
        match protos[id as usize].as_deref().map(|p| shape_context(p, radial, angular)) {
            Some(Ok(d)) => descs.push((id, d)),
            _ => singles.push(id),
        }
    }
    let k = descs.len();
    let mut dist = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in (i + 1)..k {
            let d = chi2(&descs[i].1, &descs[j].1)?;
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    let mut groups: Vec<Vec<u32>> = average_linkage(&dist, cutoff)
        .into_iter()
        .map(|c| c.into_iter().map(|i| descs[i].0).collect())
        .collect();
    groups.extend(singles.into_iter().map(|id| vec![id]));
    for g in &mut groups {
        g.sort_unstable();
    }
    groups.sort();
    let layer = vocab.layer_mut(l);
    layer.or_nodes.retain(|n| n.members.iter().all(|&m| m < first_new));
    let added = groups.len();
    for members in groups {
        let id = layer.or_nodes.len() as u32;
        layer.or_nodes.push(OrComposition { id, layer: l, members });
    }
    Ok(added)
}

/// Shape Context of the best `samples` states of one composition.
pub fn composition_descriptor(
    vocab: &Vocabulary,
    graphs: &[&InferenceGraph],
    l: usize,
    comp: u32,
    samples: usize,
    radial: usize,
    angular: usize,
) -> Result<ShapeContext> {
    let protos = prototypes(vocab, graphs, l, samples);
    let p = protos
        .get(comp as usize)
        .cloned()
        .flatten()
        .ok_or(Error::DegenerateSupport)?;
    shape_context(&p, radial, angular)
}
