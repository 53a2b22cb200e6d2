//! The layered vocabulary: layer-1 edge models, compositions of parts, OR
//! nodes grouping compositions, and the class layer on top.
//!
//! Layer `l` is stored at `layers[l - 1]`. Composition and OR ids are their
//! positions inside the layer. Part geometry is expressed in grid units of
//! the layer below; part appearance refers to OR ids of the layer below.

mod format;
mod validate;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::{Aggregation, Config};
use crate::geometry::Gaussian2;

pub use format::{load, save, to_bytes, from_bytes, FORMAT_VERSION, MAGIC};
pub use validate::{validate, Violation, ViolationKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Normal,
    Repulsive,
}

/// Sparse compatibility weights over OR ids of the layer below, sorted by id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Appearance {
    pub weights: Vec<(u32, f64)>,
}

impl Appearance {
    pub fn one_hot(or_id: u32) -> Self {
        Appearance {
            weights: vec![(or_id, 1.0)],
        }
    }

    /// Build from arbitrary entries: zero weights dropped, sorted by id.
    pub fn from_weights(mut weights: Vec<(u32, f64)>) -> Self {
        weights.retain(|w| w.1 != 0.0);
        weights.sort_by_key(|w| w.0);
        Appearance { weights }
    }

    pub fn weight(&self, or_id: u32) -> f64 {
        self.weights
            .binary_search_by_key(&or_id, |w| w.0)
            .map(|i| self.weights[i].1)
            .unwrap_or(0.0)
    }

    pub fn ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.weights.iter().map(|w| w.0)
    }

    /// OR id with the largest weight, lowest id on ties.
    pub fn primary(&self) -> Option<u32> {
        let mut best: Option<(u32, f64)> = None;
        for &(id, w) in &self.weights {
            if best.is_none_or(|b| w > b.1) {
                best = Some((id, w));
            }
        }
        best.map(|b| b.0)
    }

    pub fn max_weight(&self) -> f64 {
        self.weights.iter().map(|w| w.1).fold(0.0, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().map(|w| w.1).sum()
    }

    pub fn is_one_hot(&self) -> bool {
        self.weights.len() == 1 && self.weights[0].1 == 1.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Part {
    pub appearance: Appearance,
    pub geometry: Gaussian2,
    pub polarity: Polarity,
}

impl Part {
    pub fn reference(or_id: u32, epsilon: f64) -> Part {
        Part {
            appearance: Appearance::one_hot(or_id),
            geometry: Gaussian2::isotropic([0.0, 0.0], epsilon * epsilon),
            polarity: Polarity::Normal,
        }
    }

    pub fn normal(or_id: u32, geometry: Gaussian2) -> Part {
        Part {
            appearance: Appearance::one_hot(or_id),
            geometry,
            polarity: Polarity::Normal,
        }
    }

    pub fn is_repulsive(&self) -> bool {
        self.polarity == Polarity::Repulsive
    }

    fn sort_key(&self) -> (u32, i64, i64, u8) {
        let m = self.geometry.mean;
        let angle = m[1].atan2(m[0]);
        (
            self.appearance.primary().unwrap_or(u32::MAX),
            (angle * 1e4).round() as i64,
            ((m[0] * m[0] + m[1] * m[1]).sqrt() * 1e4).round() as i64,
            self.polarity as u8,
        )
    }
}

/// A composition of parts. Layer-1 compositions have no parts; their model
/// lives in [`Vocabulary::edge_models`].
#[derive(Debug, Clone, PartialEq)]
pub struct Composition {
    pub id: u32,
    pub layer: usize,
    /// Reference part first, the rest in canonical order.
    pub parts: Vec<Part>,
    /// Learned pruning threshold.
    pub threshold: Option<f64>,
}

impl Composition {
    pub fn new(id: u32, layer: usize, parts: Vec<Part>) -> Self {
        let mut c = Composition {
            id,
            layer,
            parts,
            threshold: None,
        };
        c.canonicalize();
        c
    }

    /// Sort non-reference parts by (OR id, quantized direction, distance).
    pub fn canonicalize(&mut self) {
        if self.parts.len() > 2 {
            self.parts[1..].sort_by_key(|p| p.sort_key());
        }
    }

    pub fn normal_parts(&self) -> usize {
        self.parts.iter().filter(|p| !p.is_repulsive()).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrComposition {
    pub id: u32,
    pub layer: usize,
    /// Member composition ids, ascending.
    pub members: Vec<u32>,
}

/// Gaussian over orientation-normalized feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeModel {
    pub orientation: usize,
    pub mean: Vec<f64>,
    /// Row-major `n x n` covariance.
    pub cov: Vec<f64>,
    pub estimated: bool,
}

impl EdgeModel {
    pub fn placeholder(orientation: usize, n: usize, variance: f64) -> Self {
        let mut mean = vec![0.0; n];
        mean[orientation] = 1.0;
        let mut cov = vec![0.0; n * n];
        for i in 0..n {
            cov[i * n + i] = variance;
        }
        EdgeModel {
            orientation,
            mean,
            cov,
            estimated: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub index: usize,
    /// Neighborhood radius used to learn this layer (grid units below).
    pub radius: u32,
    /// Downsampling applied to this layer's states.
    pub rho: f64,
    /// Global pruning threshold.
    pub tau: f64,
    pub compositions: Vec<Composition>,
    pub or_nodes: Vec<OrComposition>,
}

impl Layer {
    pub fn empty(index: usize, radius: u32, rho: f64, tau: f64) -> Self {
        Layer {
            index,
            radius,
            rho,
            tau,
            compositions: Vec::new(),
            or_nodes: Vec::new(),
        }
    }

    /// OR id of every composition (`u32::MAX` if unassigned).
    pub fn or_of(&self) -> Vec<u32> {
        let mut out = vec![u32::MAX; self.compositions.len()];
        for node in &self.or_nodes {
            for &m in &node.members {
                if let Some(slot) = out.get_mut(m as usize) {
                    *slot = node.id;
                }
            }
        }
        out
    }

    /// One OR node per composition.
    pub fn singleton_or_nodes(&mut self) {
        self.or_nodes = self
            .compositions
            .iter()
            .map(|c| OrComposition {
                id: c.id,
                layer: self.index,
                members: vec![c.id],
            })
            .collect();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    pub orientations: usize,
    pub edge_models: Vec<EdgeModel>,
    pub layers: Vec<Layer>,
    /// Index of the object layer once classes exist.
    pub object_layer: usize,
    /// Class label to object-layer composition ids.
    pub classes: BTreeMap<String, Vec<u32>>,
    pub alpha: f64,
    pub epsilon: f64,
    pub aggregation: Aggregation,
}

/// Layer-1 compositions, one per orientation, with placeholder edge models.
pub fn layer1_default(n: usize) -> Vec<Composition> {
    (0..n)
        .map(|i| Composition::new(i as u32, 1, Vec::new()))
        .collect()
}

impl Vocabulary {
    /// A vocabulary holding only layer 1 (placeholder edge models).
    pub fn new(config: &Config) -> Self {
        let n = config.features.gabor.orientations;
        let mut layer1 = Layer::empty(1, 0, config.layers.rho(1), config.inference.tau);
        layer1.compositions = layer1_default(n);
        layer1.singleton_or_nodes();
        Vocabulary {
            orientations: n,
            edge_models: (0..n)
                .map(|i| EdgeModel::placeholder(i, n, config.learning.layer1_prior_variance))
                .collect(),
            layers: vec![layer1],
            object_layer: config.layers.object_layer,
            classes: BTreeMap::new(),
            alpha: config.inference.alpha,
            epsilon: config.inference.epsilon,
            aggregation: config.inference.aggregation,
        }
    }

    /// Highest layer present.
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, l: usize) -> &Layer {
        &self.layers[l - 1]
    }

    pub fn layer_mut(&mut self, l: usize) -> &mut Layer {
        &mut self.layers[l - 1]
    }

    pub fn layer1_estimated(&self) -> bool {
        self.edge_models.iter().all(|m| m.estimated)
    }

    /// Composition counts per layer.
    pub fn layer_sizes(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.compositions.len()).collect()
    }

    /// Class owning an object-layer composition.
    pub fn class_of(&self, comp: u32) -> Option<&str> {
        self.classes
            .iter()
            .find(|(_, ids)| ids.contains(&comp))
            .map(|(c, _)| c.as_str())
    }

    /// Drop every layer above `l`.
    pub fn truncate(&mut self, l: usize) {
        self.layers.truncate(l);
        if l < self.object_layer {
            self.classes.clear();
        }
    }

    /// Compositions of each layer reachable from the given object-layer
    /// compositions through non-zero appearance entries and OR membership.
    pub fn reachable(&self, objects: &[u32]) -> Vec<Vec<bool>> {
        let mut used: Vec<Vec<bool>> = self
            .layers
            .iter()
            .map(|l| vec![false; l.compositions.len()])
            .collect();
        if self.object_layer > self.depth() {
            return used;
        }
        for &c in objects {
            if let Some(slot) = used[self.object_layer - 1].get_mut(c as usize) {
                *slot = true;
            }
        }
        for l in (2..=self.object_layer).rev() {
            let below = self.layer(l - 1);
            for (c, comp) in self.layer(l).compositions.iter().enumerate() {
                if !used[l - 1][c] {
                    continue;
                }
                for part in &comp.parts {
                    for or in part.appearance.ids() {
                        if let Some(node) = below.or_nodes.get(or as usize) {
                            for &m in &node.members {
                                used[l - 2][m as usize] = true;
                            }
                        }
                    }
                }
            }
        }
        used
    }

    /// Layer-1 edges of a composition placed at its parts' mean offsets,
    /// in pixels relative to the composition's location. Each OR node is
    /// expanded through its first member; repulsive parts are skipped.
    /// Returns `(position, orientation)` pairs.
    pub fn mean_shape(&self, l: usize, comp: u32) -> Vec<([f64; 2], usize)> {
        // pixel size of one grid cell of each layer's states
        let mut cell = vec![1.0; self.depth() + 1];
        for k in 1..=self.depth() {
            cell[k] = cell[k - 1] / self.layer(k).rho;
        }
        let mut out = Vec::new();
        let mut stack = vec![(l, comp, [0.0, 0.0])];
        while let Some((l, c, at)) = stack.pop() {
            if l == 1 {
                out.push((at, c as usize));
                continue;
            }
            let Some(comp) = self.layer(l).compositions.get(c as usize) else { continue };
            for part in comp.parts.iter().filter(|p| !p.is_repulsive()) {
                let Some(or) = part.appearance.primary() else { continue };
                let Some(&m) = self.layer(l - 1).or_nodes.get(or as usize).and_then(|n| n.members.first()) else {
                    continue;
                };
                let mu = part.geometry.mean;
                stack.push((l - 1, m, [at[0] + mu[0] * cell[l - 1], at[1] + mu[1] * cell[l - 1]]));
            }
        }
        out.sort_by(|a, b| a.0[0].total_cmp(&b.0[0]).then(a.0[1].total_cmp(&b.0[1])).then(a.1.cmp(&b.1)));
        out
    }

    /// OR nodes of layer `l` reachable from a class's object compositions.
    pub fn or_nodes_used_by(&self, class: &str, l: usize) -> Vec<bool> {
        let objects = self.classes.get(class).cloned().unwrap_or_default();
        let used = self.reachable(&objects);
        let layer = self.layer(l);
        layer
            .or_nodes
            .iter()
            .map(|n| n.members.iter().any(|&m| used[l - 1][m as usize]))
            .collect()
    }
}
