use std::fmt;

use super::Vocabulary;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ViolationKind {
    EdgeModelShape,
    EdgeModelNotPositiveDefinite,
    IdMismatch,
    LayerIndex,
    Layer1HasParts,
    NoParts,
    TooManyParts,
    ReferenceGeometry,
    ReferenceRepulsive,
    DanglingReference,
    NegativeWeight,
    NotOneHot,
    NotNormalized,
    NotPositiveDefinite,
    MeanOutsideRadius,
    EmptyOrNode,
    NotPartition,
    BadThreshold,
    ClassReference,
}

impl ViolationKind {
    pub fn describe(self) -> &'static str {
        match self {
            ViolationKind::EdgeModelShape => "edge model dimensions disagree with the orientation count",
            ViolationKind::EdgeModelNotPositiveDefinite => "edge model covariance is not positive definite",
            ViolationKind::IdMismatch => "id differs from position",
            ViolationKind::LayerIndex => "layer index differs from position",
            ViolationKind::Layer1HasParts => "layer-1 composition has parts",
            ViolationKind::NoParts => "composition has no normal parts",
            ViolationKind::TooManyParts => "composition has more than 10 normal parts",
            ViolationKind::ReferenceGeometry => "reference part is not a zero-mean isotropic Gaussian",
            ViolationKind::ReferenceRepulsive => "reference part is repulsive",
            ViolationKind::DanglingReference => "appearance refers to a missing OR node",
            ViolationKind::NegativeWeight => "appearance weight is not positive and finite",
            ViolationKind::NotOneHot => "appearance below the object layer is not one-hot",
            ViolationKind::NotNormalized => "object-layer appearance does not sum to 1",
            ViolationKind::NotPositiveDefinite => "part covariance is not positive definite",
            ViolationKind::MeanOutsideRadius => "part mean lies outside the layer radius",
            ViolationKind::EmptyOrNode => "OR node has no members",
            ViolationKind::NotPartition => "OR nodes do not partition the compositions",
            ViolationKind::BadThreshold => "threshold outside [0, 1]",
            ViolationKind::ClassReference => "class refers to a missing object-layer composition",
        }
    }
}

/// One broken invariant: where and which rule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub layer: usize,
    pub id: Option<u32>,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.id {
            Some(id) => write!(f, "layer {} id {}: {}", self.layer, id, self.kind.describe()),
            None => write!(f, "layer {}: {}", self.layer, self.kind.describe()),
        }
    }
}

const MAX_NORMAL_PARTS: usize = 10;
const SUM_TOLERANCE: f64 = 1e-6;

/// Every broken invariant, empty when the vocabulary is well formed.
pub fn validate(v: &Vocabulary) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |layer: usize, id: Option<u32>, kind: ViolationKind| {
        out.push(Violation { layer, id, kind })
    };
    let n = v.orientations;

    if v.edge_models.len() != n {
        push(1, None, ViolationKind::EdgeModelShape);
    }
    for (i, m) in v.edge_models.iter().enumerate() {
        if m.orientation != i || m.mean.len() != n || m.cov.len() != n * n {
            push(1, Some(i as u32), ViolationKind::EdgeModelShape);
        } else if !cholesky_ok(&m.cov, n) {
            push(1, Some(i as u32), ViolationKind::EdgeModelNotPositiveDefinite);
        }
    }

    for (li, layer) in v.layers.iter().enumerate() {
        let l = li + 1;
        if layer.index != l {
            push(l, None, ViolationKind::LayerIndex);
        }
        if l == 1 && layer.compositions.len() != n {
            push(1, None, ViolationKind::EdgeModelShape);
        }
        let below_ors = if l > 1 {
            v.layers[li - 1].or_nodes.len()
        } else {
            0
        };
        let is_object = l == v.object_layer;
        for (ci, comp) in layer.compositions.iter().enumerate() {
            let id = Some(ci as u32);
            if comp.id != ci as u32 || comp.layer != l {
                push(l, id, ViolationKind::IdMismatch);
            }
            if let Some(t) = comp.threshold {
                if !(0.0..=1.0).contains(&t) {
                    push(l, id, ViolationKind::BadThreshold);
                }
            }
            if l == 1 {
                if !comp.parts.is_empty() {
                    push(l, id, ViolationKind::Layer1HasParts);
                }
                continue;
            }
            let normal = comp.normal_parts();
            if normal == 0 {
                push(l, id, ViolationKind::NoParts);
            }
            if normal > MAX_NORMAL_PARTS {
                push(l, id, ViolationKind::TooManyParts);
            }
            for (pi, part) in comp.parts.iter().enumerate() {
                if pi == 0 {
                    if part.is_repulsive() {
                        push(l, id, ViolationKind::ReferenceRepulsive);
                    }
                    let g = &part.geometry;
                    let e2 = v.epsilon * v.epsilon;
                    if g.mean != [0.0, 0.0] || g.cov != [[e2, 0.0], [0.0, e2]] {
                        push(l, id, ViolationKind::ReferenceGeometry);
                    }
                }
                if !part.geometry.is_positive_definite() {
                    push(l, id, ViolationKind::NotPositiveDefinite);
                }
                let m = part.geometry.mean;
                if layer.radius > 0 && m[0].hypot(m[1]) > layer.radius as f64 + 1e-9 {
                    push(l, id, ViolationKind::MeanOutsideRadius);
                }
                if part.appearance.weights.is_empty() {
                    push(l, id, ViolationKind::DanglingReference);
                }
                for &(or, w) in &part.appearance.weights {
                    if or as usize >= below_ors {
                        push(l, id, ViolationKind::DanglingReference);
                    }
                    if !(w > 0.0 && w.is_finite()) {
                        push(l, id, ViolationKind::NegativeWeight);
                    }
                }
                if is_object {
                    if (part.appearance.sum() - 1.0).abs() > SUM_TOLERANCE {
                        push(l, id, ViolationKind::NotNormalized);
                    }
                } else if !part.appearance.is_one_hot() {
                    push(l, id, ViolationKind::NotOneHot);
                }
            }
        }

        let mut owner = vec![0usize; layer.compositions.len()];
        for (oi, node) in layer.or_nodes.iter().enumerate() {
            if node.id != oi as u32 || node.layer != l {
                push(l, Some(oi as u32), ViolationKind::IdMismatch);
            }
            if node.members.is_empty() {
                push(l, Some(oi as u32), ViolationKind::EmptyOrNode);
            }
            for &m in &node.members {
                match owner.get_mut(m as usize) {
                    Some(c) => *c += 1,
                    None => push(l, Some(oi as u32), ViolationKind::NotPartition),
                }
            }
        }
        if owner.iter().any(|&c| c != 1) {
            push(l, None, ViolationKind::NotPartition);
        }
    }

    if !v.classes.is_empty() {
        let count = if v.object_layer >= 1 && v.object_layer <= v.layers.len() {
            v.layers[v.object_layer - 1].compositions.len()
        } else {
            0
        };
        for ids in v.classes.values() {
            for &c in ids {
                if c as usize >= count {
                    push(v.object_layer, Some(c), ViolationKind::ClassReference);
                }
            }
        }
    }
    out
}

fn cholesky_ok(cov: &[f64], n: usize) -> bool {
    if cov.iter().any(|x| !x.is_finite()) {
        return false;
    }
    for i in 0..n {
        for j in 0..i {
            if (cov[i * n + j] - cov[j * n + i]).abs() > 1e-9 * (1.0 + cov[i * n + j].abs()) {
                return false;
            }
        }
    }
    nalgebra::DMatrix::from_row_slice(n, n, cov).cholesky().is_some()
}
