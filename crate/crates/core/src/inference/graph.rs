use std::collections::BTreeSet;
use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::index::LayerIndex;
use crate::error::{Error, Result};
use crate::geometry::BBox;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NodeKind {
    Composition,
    Or,
}

/// Address of a state: layer (1-based), kind and position in that list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeRef {
    pub layer: usize,
    pub kind: NodeKind,
    pub index: u32,
}

impl NodeRef {
    pub fn comp(layer: usize, index: u32) -> Self {
        NodeRef {
            layer,
            kind: NodeKind::Composition,
            index,
        }
    }

    pub fn or(layer: usize, index: u32) -> Self {
        NodeRef {
            layer,
            kind: NodeKind::Or,
            index,
        }
    }
}

/// A hidden state: composition or OR id at a grid location.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub id: u32,
    /// Location in this layer's (downsampled) grid.
    pub loc: [i32; 2],
    /// Anchor location in the grid of the layer below, before downsampling.
    /// Equal to `loc` for layer 1 and for OR states.
    pub origin: [i32; 2],
    pub score: f64,
    /// Composition states: the OR state chosen for each normal part, in part
    /// order. OR states: the winning composition state.
    pub children: Vec<NodeRef>,
    /// Sorted indices of the layer-1 features reachable through `children`.
    pub support: Arc<[u32]>,
}

#[derive(Debug, Clone, Default)]
pub struct GraphLayer {
    pub comps: Vec<State>,
    pub ors: Vec<State>,
    /// Grid size of this layer.
    pub width: usize,
    pub height: usize,
    /// Grid units per pixel: cumulative product of downsampling factors.
    pub scale: f64,
    pub index: LayerIndex,
}

impl GraphLayer {
    pub fn state_count(&self) -> usize {
        self.comps.len() + self.ors.len()
    }
}

/// Layered parse structure over one feature set.
#[derive(Debug, Clone, Default)]
pub struct InferenceGraph {
    pub width: usize,
    pub height: usize,
    pub scale_index: usize,
    /// Pixel location of every layer-1 feature.
    pub points: Vec<[u32; 2]>,
    /// `layers[l - 1]` holds layer `l`.
    pub layers: Vec<GraphLayer>,
}

impl InferenceGraph {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, l: usize) -> &GraphLayer {
        &self.layers[l - 1]
    }

    pub fn state(&self, node: NodeRef) -> Result<&State> {
        let layer = node
            .layer
            .checked_sub(1)
            .and_then(|i| self.layers.get(i))
            .ok_or(Error::UnknownState(node))?;
        let list = match node.kind {
            NodeKind::Composition => &layer.comps,
            NodeKind::Or => &layer.ors,
        };
        list.get(node.index as usize).ok_or(Error::UnknownState(node))
    }

    /// Layer-1 feature indices under `node`.
    pub fn support(&self, node: NodeRef) -> Result<&[u32]> {
        Ok(&self.state(node)?.support)
    }

    /// Pixel locations of the support of `node`.
    pub fn support_points(&self, node: NodeRef) -> Result<Vec<[u32; 2]>> {
        Ok(self
            .support(node)?
            .iter()
            .map(|&i| self.points[i as usize])
            .collect())
    }

    /// Bounding rectangle of the support in this graph's pixel frame.
    pub fn support_box(&self, node: NodeRef) -> Result<Option<BBox>> {
        Ok(BBox::enclosing(
            self.support(node)?
                .iter()
                .map(|&i| self.points[i as usize])
                .map(|p| [p[0] as f64, p[1] as f64]),
        ))
    }

    /// Every node reachable downward from `node`, including itself, sorted.
    pub fn parse_graph(&self, node: NodeRef) -> Result<Vec<NodeRef>> {
        self.state(node)?;
        let mut seen = BTreeSet::new();
        let mut stack = vec![node];
        while let Some(n) = stack.pop() {
            if seen.insert(n) {
                stack.extend(self.state(n)?.children.iter().copied());
            }
        }
        Ok(seen.into_iter().collect())
    }

    /// Union of supports of several nodes.
    pub fn support_of_set(&self, nodes: &[NodeRef]) -> Result<Vec<u32>> {
        let parts = nodes
            .iter()
            .map(|&n| self.support(n))
            .collect::<Result<Vec<_>>>()?;
        Ok(merge_supports(&parts))
    }

    pub fn state_count(&self) -> usize {
        self.layers.iter().map(|l| l.state_count()).sum()
    }

    /// Plain-text dump: one line per state.
    pub fn dump(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(
            out,
            "graph {}x{} scale_index {} features {}",
            self.width,
            self.height,
            self.scale_index,
            self.points.len()
        )?;
        for (li, layer) in self.layers.iter().enumerate() {
            writeln!(
                out,
                "layer {} grid {}x{} comps {} ors {}",
                li + 1,
                layer.width,
                layer.height,
                layer.comps.len(),
                layer.ors.len()
            )?;
            for (kind, list) in [("c", &layer.comps), ("o", &layer.ors)] {
                for (i, s) in list.iter().enumerate() {
                    let children: Vec<String> = s
                        .children
                        .iter()
                        .map(|c| {
                            let k = if c.kind == NodeKind::Or { 'o' } else { 'c' };
                            format!("{}{}:{}", k, c.layer, c.index)
                        })
                        .collect();
                    writeln!(
                        out,
                        "{kind}{}:{i} id={} at=({},{}) score={:.6} support={} children=[{}]",
                        li + 1,
                        s.id,
                        s.loc[0],
                        s.loc[1],
                        s.score,
                        s.support.len(),
                        children.join(",")
                    )?;
                }
            }
        }
        Ok(())
    }
}

/// Sorted, deduplicated union of sorted index lists.
pub fn merge_supports(parts: &[&[u32]]) -> Vec<u32> {
    match parts {
        [] => Vec::new(),
        [one] => one.to_vec(),
        _ => {
            let mut out: Vec<u32> = parts.iter().flat_map(|p| p.iter().copied()).collect();
            out.sort_unstable();
            out.dedup();
            out
        }
    }
}
