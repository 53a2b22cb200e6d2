//! Parameter estimation: layer-1 edge models, part geometry refinement and
//! object-layer appearance weights.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

use crate::config::Config;
use crate::error::Result;
use crate::features::FeatureSet;
use crate::geometry::Gaussian2;
use crate::inference::{Engine, InferenceGraph};
use crate::structure_learning::overlap;
use crate::vocabulary::{Appearance, EdgeModel, Vocabulary};

/// Fit one Gaussian per dominant orientation to normalized feature vectors.
/// Covariance eigenvalues are floored at `floor`; orientations with fewer
/// than `min_samples` features get a prior (one-hot mean, isotropic
/// `prior_variance`).
pub fn fit_edge_models(
    sets: &[&FeatureSet],
    orientations: usize,
    floor: f64,
    min_samples: usize,
    prior_variance: f64,
) -> Vec<EdgeModel> {
    let n = orientations;
    let mut sums = vec![vec![0.0; n]; n];
    let mut outer = vec![vec![0.0; n * n]; n];
    let mut counts = vec![0usize; n];
    for set in sets {
        for f in &set.features {
            let o = f.dominant as usize;
            if o >= n || f.energies.len() != n {
                continue;
            }
            let v = f.normalized();
            counts[o] += 1;
            for i in 0..n {
                sums[o][i] += v[i];
                for j in 0..n {
                    outer[o][i * n + j] += v[i] * v[j];
                }
            }
        }
    }
    (0..n)
        .map(|o| {
            if counts[o] < min_samples.max(2) {
                let mut m = EdgeModel::placeholder(o, n, prior_variance);
                m.estimated = true;
                return m;
            }
            let c = counts[o] as f64;
            let mean: Vec<f64> = sums[o].iter().map(|s| s / c).collect();
            let mut cov = DMatrix::from_fn(n, n, |i, j| outer[o][i * n + j] / c - mean[i] * mean[j]);
            cov = (&cov + cov.transpose()) * 0.5;
            let eig = SymmetricEigen::new(cov);
            let vals = eig.eigenvalues.map(|v| v.max(floor));
            let fixed = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
            let fixed = (&fixed + fixed.transpose()) * 0.5;
            EdgeModel {
                orientation: o,
                mean,
                cov: fixed.transpose().as_slice().to_vec(),
                estimated: true,
            }
        })
        .collect()
}

/// Estimate the layer-1 edge models of `vocab` from feature sets.
pub fn estimate_layer1(vocab: &mut Vocabulary, sets: &[&FeatureSet], config: &Config) {
    let lc = &config.learning;
    vocab.edge_models = fit_edge_models(
        sets,
        vocab.orientations,
        lc.layer1_floor,
        lc.layer1_min_samples,
        lc.layer1_prior_variance,
    );
}

/// Best composition match anchored at one OR state of the layer below.
#[derive(Debug, Clone, PartialEq)]
pub struct BestMatch {
    pub graph: u32,
    pub comp: u32,
    pub score: f64,
    /// Offsets of the chosen child of every normal part from the anchor.
    pub offsets: Vec<[f64; 2]>,
}

/// For every OR state of layer `l - 1` in every graph, the best-scoring
/// composition of layer `l` anchored there (none when nothing clears tau).
pub fn best_matches(engine: &Engine, vocab: &Vocabulary, graphs: &[&InferenceGraph], l: usize) -> (Vec<BestMatch>, usize) {
    let layer = vocab.layer(l);
    let mut by_anchor: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    for c in &layer.compositions {
        for or in c.parts[0].appearance.ids() {
            by_anchor.entry(or).or_default().push(c.id);
        }
    }
    let per: Vec<(Vec<BestMatch>, usize)> = graphs
        .par_iter()
        .enumerate()
        .map(|(gi, g)| {
            let mut out = Vec::new();
            if g.depth() < l - 1 {
                return (out, 0);
            }
            let below = g.layer(l - 1);
            for c in &below.ors {
                let mut best: Option<BestMatch> = None;
                for &comp in by_anchor.get(&c.id).map(|v| v.as_slice()).unwrap_or(&[]) {
                    let Some(s) = engine.score_at(l, comp, c.loc, below, layer.tau) else {
                        continue;
                    };
                    if best.as_ref().is_none_or(|b| s.score > b.score) {
                        let offsets = s
                            .children
                            .iter()
                            .map(|&i| {
                                let st = &below.ors[i as usize];
                                [(st.loc[0] - c.loc[0]) as f64, (st.loc[1] - c.loc[1]) as f64]
                            })
                            .collect();
                        best = Some(BestMatch {
                            graph: gi as u32,
                            comp,
                            score: s.score,
                            offsets,
                        });
                    }
                }
                out.extend(best);
            }
            (out, below.ors.len())
        })
        .collect();
    let centers = per.iter().map(|p| p.1).sum();
    (per.into_iter().flat_map(|p| p.0).collect(), centers)
}

fn mean_best(matches: &[BestMatch], centers: usize) -> f64 {
    if centers == 0 {
        0.0
    } else {
        matches.iter().map(|m| m.score).sum::<f64>() / centers as f64
    }
}

/// Outcome of one geometry refinement round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoundOutcome {
    Full,
    MeanOnly,
    Rejected,
}

/// Refit non-reference part geometry of layer `l` from the offsets of best
/// matches (hard EM). A round is kept only if the mean best score over all
/// anchors does not drop; failing that a mean-only update is tried, then
/// the round is reverted. Stops early once a round is rejected. Only
/// compositions with ids from `first` on are refit.
pub fn refine_geometry(
    vocab: &mut Vocabulary,
    graphs: &[&InferenceGraph],
    l: usize,
    first: u32,
    config: &Config,
) -> Result<Vec<RoundOutcome>> {
    let floor = config.learning.geometry_floor;
    let min_samples = 3;
    let mut outcomes = Vec::new();
    let engine = Engine::new(vocab)?;
    let (mut matches, centers) = best_matches(&engine, vocab, graphs, l);
    let mut current = mean_best(&matches, centers);
    for _ in 0..config.learning.em_rounds {
        let radius = vocab.layer(l).radius as f64;
        let comps = &vocab.layer(l).compositions;
        let mut samples: Vec<Vec<Vec<([f64; 2], f64)>>> = comps
            .iter()
            .map(|c| vec![Vec::new(); c.normal_parts()])
            .collect();
        for m in &matches {
            for (k, off) in m.offsets.iter().enumerate() {
                samples[m.comp as usize][k].push((*off, m.score));
            }
        }
        let mut full = vocab.clone();
        let mut mean_only = vocab.clone();
        for (ci, per_part) in samples.iter().enumerate().skip(first as usize) {
            let normal: Vec<usize> = (0..comps[ci].parts.len())
                .filter(|&p| !comps[ci].parts[p].is_repulsive())
                .collect();
            for (k, s) in per_part.iter().enumerate().skip(1) {
                if s.len() < min_samples {
                    continue;
                }
                let Some(mut g) = Gaussian2::fit_weighted(s, floor) else {
                    continue;
                };
                let n = g.mean[0].hypot(g.mean[1]);
                if radius > 0.0 && n > radius {
                    g.mean = [g.mean[0] * radius / n, g.mean[1] * radius / n];
                }
                let p = normal[k];
                full.layer_mut(l).compositions[ci].parts[p].geometry = g;
                mean_only.layer_mut(l).compositions[ci].parts[p].geometry.mean = g.mean;
            }
        }
        for c in &mut full.layer_mut(l).compositions {
            c.canonicalize();
        }
        for c in &mut mean_only.layer_mut(l).compositions {
            c.canonicalize();
        }
        let mut outcome = RoundOutcome::Rejected;
        for (cand, kind) in [(full, RoundOutcome::Full), (mean_only, RoundOutcome::MeanOnly)] {
            let e = Engine::new(&cand)?;
            let (m, c) = best_matches(&e, &cand, graphs, l);
            let score = mean_best(&m, c);
            if score >= current {
                *vocab = cand;
                matches = m;
                current = score;
                outcome = kind;
                break;
            }
        }
        outcomes.push(outcome);
        if outcome == RoundOutcome::Rejected {
            break;
        }
    }
    Ok(outcomes)
}

/// Object-layer appearance: for each non-reference part, the OR ids found
/// where its chosen child lies (same cell, support IoU above `min_iou`),
/// as a normalized histogram. Entries below `min_share` of the mass are
/// dropped. Each graph contributes the best match of every composition
/// with id `first` or above; the others are left alone.
pub fn object_appearance(
    vocab: &mut Vocabulary,
    graphs: &[&InferenceGraph],
    l: usize,
    first: u32,
    min_iou: f64,
    min_share: f64,
) -> Result<()> {
    let engine = Engine::new(vocab)?;
    let layer = vocab.layer(l);
    let tau = layer.tau;
    let mut hist: Vec<Vec<BTreeMap<u32, f64>>> = layer
        .compositions
        .iter()
        .map(|c| vec![BTreeMap::new(); c.parts.len()])
        .collect();
    for g in graphs {
        if g.depth() < l - 1 {
            continue;
        }
        let below = g.layer(l - 1);
        for (ci, c) in layer.compositions.iter().enumerate().skip(first as usize) {
            let mut best: Option<(f64, Vec<u32>)> = None;
            for or in c.parts[0].appearance.ids() {
                for &si in below.index.of_or(or) {
                    let a = below.ors[si as usize].loc;
                    if let Some(s) = engine.score_at(l, ci as u32, a, below, tau) {
                        if best.as_ref().is_none_or(|b| s.score > b.0) {
                            best = Some((s.score, s.children));
                        }
                    }
                }
            }
            let Some((_, children)) = best else { continue };
            let normal: Vec<usize> = (0..c.parts.len()).filter(|&p| !c.parts[p].is_repulsive()).collect();
            for (k, &child) in children.iter().enumerate().skip(1) {
                let st = &below.ors[child as usize];
                for (or, other) in below.index.in_square(st.loc[0], st.loc[1], 0) {
                    let o = &below.ors[other as usize];
                    if other == child || overlap(&st.support, &o.support) > min_iou {
                        *hist[ci][normal[k]].entry(or).or_default() += 1.0;
                    }
                }
            }
        }
    }
    let layer = vocab.layer_mut(l);
    for (ci, c) in layer.compositions.iter_mut().enumerate().skip(first as usize) {
        for (p, part) in c.parts.iter_mut().enumerate().skip(1) {
            let h = &hist[ci][p];
            let total: f64 = h.values().sum();
            if total <= 0.0 {
                continue;
            }
            let kept: Vec<(u32, f64)> = h
                .iter()
                .filter(|(_, &v)| v >= min_share * total)
                .map(|(&k, &v)| (k, v))
                .collect();
            let sum: f64 = kept.iter().map(|k| k.1).sum();
            if sum > 0.0 {
                part.appearance = Appearance::from_weights(kept.into_iter().map(|(k, v)| (k, v / sum)).collect());
            }
        }
        // reference parts anchor by id; keep them one-hot
    }
    Ok(())
}
