use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;

use super::graph::{merge_supports, GraphLayer, InferenceGraph, NodeRef, State};
use super::index::LayerIndex;
use crate::config::Aggregation;
use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::geometry::Gaussian2;
use crate::vocabulary::{validate, Vocabulary};

/// `exp(-0.5 (x-mu)^T Sigma^-1 (x-mu))` for a part offset.
pub fn deformation(offset: [f64; 2], geometry: &Gaussian2) -> Result<f64> {
    geometry.deformation(offset)
}

/// Squared Mahalanobis radius outside of which a part factor cannot keep a
/// composition of `parts` factors above `tau`.
pub fn window_m2(tau: f64, aggregation: Aggregation, parts: usize) -> f64 {
    let base = -2.0 * tau.ln();
    match aggregation {
        Aggregation::Product => base,
        Aggregation::GeometricMean => base * parts.max(1) as f64,
    }
}

#[derive(Debug, Clone)]
struct CompiledEdge {
    mean: Vec<f64>,
    precision: Vec<f64>,
}

#[derive(Debug, Clone)]
struct CompiledPart {
    /// `(dx, dy, D)` in row-major order.
    window: Vec<(i32, i32, f64)>,
    weights: Vec<(u32, f64)>,
    max_weight: f64,
    repulsive: bool,
}

#[derive(Debug, Clone)]
struct CompiledComp {
    parts: Vec<CompiledPart>,
    /// OR ids of the layer below that can anchor this composition.
    anchors: Vec<u32>,
    threshold: f64,
}

#[derive(Debug, Clone)]
struct CompiledLayer {
    tau: f64,
    rho: f64,
    or_of: Vec<u32>,
    or_count: usize,
    comps: Vec<CompiledComp>,
}

/// Result of scoring one composition at one anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub score: f64,
    /// Chosen OR state (index into the layer below) per normal part.
    pub children: Vec<u32>,
}

/// A vocabulary compiled for repeated inference: precomputed part windows,
/// edge-model precisions and anchor tables. Read-only and shareable.
#[derive(Debug, Clone)]
pub struct Engine {
    edges: Option<Vec<CompiledEdge>>,
    layers: Vec<CompiledLayer>,
    aggregation: Aggregation,
    alpha: f64,
}

impl Engine {
    pub fn new(vocab: &Vocabulary) -> Result<Engine> {
        let violations = validate(vocab);
        if !violations.is_empty() {
            return Err(Error::Invalid(violations));
        }
        let edges = if vocab.layer1_estimated() {
            let mut out = Vec::new();
            for m in &vocab.edge_models {
                let n = m.dim();
                let inv = DMatrix::from_row_slice(n, n, &m.cov)
                    .cholesky()
                    .ok_or(Error::SingularCovariance)?
                    .inverse();
                out.push(CompiledEdge {
                    mean: m.mean.clone(),
                    precision: inv.transpose().as_slice().to_vec(),
                });
            }
            Some(out)
        } else {
            None
        };
        let mut layers = Vec::new();
        for layer in &vocab.layers {
            let mut comps = Vec::new();
            for c in &layer.compositions {
                let n = c.parts.len();
                let m2 = window_m2(layer.tau, vocab.aggregation, n);
                let mut parts = Vec::with_capacity(n);
                for p in &c.parts {
                    let window = p
                        .geometry
                        .window(m2)?
                        .into_iter()
                        .map(|(d, v)| (d[0], d[1], v))
                        .collect();
                    parts.push(CompiledPart {
                        window,
                        weights: p.appearance.weights.clone(),
                        max_weight: p.appearance.max_weight(),
                        repulsive: p.is_repulsive(),
                    });
                }
                let anchors = c
                    .parts
                    .first()
                    .map(|p| p.appearance.ids().collect())
                    .unwrap_or_default();
                comps.push(CompiledComp {
                    parts,
                    anchors,
                    threshold: c.threshold.unwrap_or(0.0),
                });
            }
            layers.push(CompiledLayer {
                tau: layer.tau,
                rho: layer.rho,
                or_of: layer.or_of(),
                or_count: layer.or_nodes.len(),
                comps,
            });
        }
        Ok(Engine {
            edges,
            layers,
            aggregation: vocab.aggregation,
            alpha: vocab.alpha,
        })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Layer-1 states: every (feature, edge model) pair scoring above the
    /// layer-1 threshold. Feature vectors are normalized so the dominant
    /// orientation equals 1.
    pub fn match_layer1(&self, features: &FeatureSet) -> Result<Vec<State>> {
        let edges = self.edges.as_ref().ok_or(Error::Layer1NotEstimated)?;
        let layer = &self.layers[0];
        let mut out = Vec::new();
        let mut d = Vec::new();
        for (fi, f) in features.features.iter().enumerate() {
            let v = f.normalized();
            if v.len() != edges[0].mean.len() {
                return Err(Error::InvalidConfig(format!(
                    "features have {} orientations, vocabulary {}",
                    v.len(),
                    edges[0].mean.len()
                )));
            }
            for (k, e) in edges.iter().enumerate() {
                let n = e.mean.len();
                d.clear();
                d.extend(v.iter().zip(&e.mean).map(|(a, b)| a - b));
                let mut m2 = 0.0;
                for i in 0..n {
                    let row = &e.precision[i * n..(i + 1) * n];
                    let r: f64 = row.iter().zip(&d).map(|(p, x)| p * x).sum();
                    m2 += d[i] * r;
                }
                let s = (-0.5 * m2.max(0.0)).exp();
                if s > layer.tau && s >= layer.comps[k].threshold {
                    let loc = [f.x as i32, f.y as i32];
                    out.push(State {
                        id: k as u32,
                        loc,
                        origin: loc,
                        score: s,
                        children: Vec::new(),
                        support: Arc::from(vec![fi as u32]),
                    });
                }
            }
        }
        Ok(out)
    }

    /// Score composition `comp` of layer `l` anchored at `anchor` (grid of
    /// layer `l - 1`). Returns `None` when a normal part has no candidate or
    /// the score cannot exceed `floor`.
    pub fn score_at(
        &self,
        l: usize,
        comp: u32,
        anchor: [i32; 2],
        below: &GraphLayer,
        floor: f64,
    ) -> Option<Scored> {
        let c = &self.layers[l - 1].comps[comp as usize];
        let ors = &below.ors;
        let mut prod = 1.0;
        let mut children = Vec::with_capacity(c.parts.len());
        let inv = 1.0 / c.parts.len().max(1) as f64;
        for part in &c.parts {
            let factor = if part.repulsive {
                let mut best: Option<f64> = None;
                for &(or, w) in &part.weights {
                    for &(dx, dy, _) in &part.window {
                        if let Some(si) = below.index.at(or, anchor[0] + dx, anchor[1] + dy) {
                            let v = w * (1.0 - ors[si as usize].score);
                            if best.is_none_or(|b| v > b) {
                                best = Some(v);
                            }
                        }
                    }
                }
                self.alpha * best.unwrap_or(part.max_weight)
            } else {
                let mut best = 0.0;
                let mut arg = None;
                for &(or, w) in &part.weights {
                    for &(dx, dy, d) in &part.window {
                        if let Some(si) = below.index.at(or, anchor[0] + dx, anchor[1] + dy) {
                            let v = ors[si as usize].score * d * w;
                            if v > best {
                                best = v;
                                arg = Some(si);
                            }
                        }
                    }
                }
                children.push(arg?);
                best
            };
            prod *= factor;
            let bound = match self.aggregation {
                Aggregation::Product => prod,
                Aggregation::GeometricMean => prod.powf(inv),
            };
            if bound <= floor {
                return None;
            }
        }
        let score = match self.aggregation {
            Aggregation::Product => prod,
            Aggregation::GeometricMean => prod.powf(inv),
        };
        Some(Scored { score, children })
    }

    /// Composition states of layer `l` before downsampling, in composition
    /// order then row-major anchor order. `loc` and `origin` both hold the
    /// anchor; supports are left empty.
    pub fn build_layer(&self, l: usize, below: &GraphLayer) -> Vec<State> {
        let layer = &self.layers[l - 1];
        let per_comp: Vec<Vec<State>> = (0..layer.comps.len())
            .into_par_iter()
            .map(|ci| {
                let c = &layer.comps[ci];
                let mut anchors: Vec<[i32; 2]> = c
                    .anchors
                    .iter()
                    .flat_map(|&or| below.index.of_or(or).iter())
                    .map(|&si| below.ors[si as usize].loc)
                    .collect();
                anchors.sort_unstable_by_key(|a| (a[1], a[0]));
                anchors.dedup();
                let floor = layer.tau;
                let mut out = Vec::new();
                for a in anchors {
                    if let Some(s) = self.score_at(l, ci as u32, a, below, floor) {
                        if s.score > layer.tau && s.score >= c.threshold {
                            out.push(State {
                                id: ci as u32,
                                loc: a,
                                origin: a,
                                score: s.score,
                                children: s
                                    .children
                                    .into_iter()
                                    .map(|i| NodeRef::or(l - 1, i))
                                    .collect(),
                                support: Arc::from(Vec::new()),
                            });
                        }
                    }
                }
                out
            })
            .collect();
        per_comp.into_iter().flatten().collect()
    }

    fn finish_layer(
        &self,
        l: usize,
        states: Vec<State>,
        below: Option<&GraphLayer>,
        width: usize,
        height: usize,
        scale: f64,
    ) -> GraphLayer {
        let layer = &self.layers[l - 1];
        let mut comps = downsample(states, layer.rho, width, height);
        if let Some(below) = below {
            for s in &mut comps {
                let parts: Vec<&[u32]> = s
                    .children
                    .iter()
                    .map(|c| &*below.ors[c.index as usize].support)
                    .collect();
                s.support = Arc::from(merge_supports(&parts));
            }
        }
        let ors = pool_or(&comps, &layer.or_of, l);
        let index = LayerIndex::new(&ors, width, height, layer.or_count);
        GraphLayer {
            comps,
            ors,
            width,
            height,
            scale,
            index,
        }
    }

    /// Parse a feature set up to layer `up_to` (capped at the vocabulary depth).
    pub fn infer(&self, features: &FeatureSet, up_to: usize) -> Result<InferenceGraph> {
        let mut graph = InferenceGraph {
            width: features.width,
            height: features.height,
            scale_index: features.scale_index,
            points: features.features.iter().map(|f| [f.x, f.y]).collect(),
            layers: Vec::new(),
        };
        if up_to == 0 {
            return Ok(graph);
        }
        let z1 = self.match_layer1(features)?;
        let first = self.finish_layer(1, z1, None, features.width, features.height, 1.0);
        graph.layers.push(first);
        self.extend(&mut graph, up_to);
        Ok(graph)
    }

    /// Add layers on top of an existing graph, up to `up_to`.
    pub fn extend(&self, graph: &mut InferenceGraph, up_to: usize) {
        let top = up_to.min(self.depth());
        while graph.layers.len() < top && !graph.layers.is_empty() {
            let l = graph.layers.len() + 1;
            let below = graph.layers.last().unwrap();
            let rho = self.layers[l - 1].rho;
            let shrink = |n: usize| {
                if n == 0 {
                    0
                } else {
                    ((n - 1) as f64 * rho).floor() as usize + 1
                }
            };
            let (w, h) = (shrink(below.width), shrink(below.height));
            let states = self.build_layer(l, below);
            let next = self.finish_layer(l, states, Some(below), w, h, below.scale * rho);
            graph.layers.push(next);
        }
    }
}

/// Scale locations by `rho` (floor) and keep the best state per
/// (id, location); ties keep the earlier state. Output sorted by id, then
/// row-major location.
pub fn downsample(states: Vec<State>, rho: f64, width: usize, height: usize) -> Vec<State> {
    let mut keyed: Vec<((u32, i32, i32), State)> = states
        .into_iter()
        .map(|mut s| {
            let x = ((s.loc[0] as f64 * rho).floor() as i32).clamp(0, width.max(1) as i32 - 1);
            let y = ((s.loc[1] as f64 * rho).floor() as i32).clamp(0, height.max(1) as i32 - 1);
            s.loc = [x, y];
            ((s.id, y, x), s)
        })
        .collect();
    keyed.sort_by_key(|k| k.0);
    let mut out: Vec<State> = Vec::with_capacity(keyed.len());
    let mut last_key = None;
    for (key, s) in keyed {
        if last_key == Some(key) {
            let prev = out.last_mut().unwrap();
            if s.score > prev.score {
                *prev = s;
            }
        } else {
            out.push(s);
            last_key = Some(key);
        }
    }
    out
}

/// One OR state per (OR id, location) holding the best member score, with an
/// edge to that member. Ties go to the lower composition id. Output sorted
/// by OR id, then row-major location.
pub fn pool_or(comps: &[State], or_of: &[u32], layer: usize) -> Vec<State> {
    let mut keyed: Vec<((u32, i32, i32), u32)> = comps
        .iter()
        .enumerate()
        .filter_map(|(i, s)| {
            let or = *or_of.get(s.id as usize)?;
            (or != u32::MAX).then_some(((or, s.loc[1], s.loc[0]), i as u32))
        })
        .collect();
    keyed.sort_by_key(|k| (k.0, comps[k.1 as usize].id));
    let mut out: Vec<State> = Vec::new();
    let mut last_key = None;
    for (key, ci) in keyed {
        let s = &comps[ci as usize];
        if last_key == Some(key) {
            let prev = out.last_mut().unwrap();
            if s.score > prev.score {
                prev.score = s.score;
                prev.children = vec![NodeRef::comp(layer, ci)];
                prev.support = s.support.clone();
            }
        } else {
            out.push(State {
                id: key.0,
                loc: s.loc,
                origin: s.loc,
                score: s.score,
                children: vec![NodeRef::comp(layer, ci)],
                support: s.support.clone(),
            });
            last_key = Some(key);
        }
    }
    out
}
