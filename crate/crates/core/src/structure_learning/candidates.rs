use std::collections::BTreeMap;

use rayon::prelude::*;

use super::histogram::Duplet;
use super::{intersection_size, overlap};
use crate::config::Aggregation;
use crate::error::Result;
use crate::inference::{merge_supports, window_m2, Engine, GraphLayer, InferenceGraph, State};

/// Identity of a candidate composition.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CandidateKey {
    /// Reference OR id plus ascending duplet ids.
    New { reference: u32, duplets: Vec<u32> },
    /// A composition already in the vocabulary.
    Existing(u32),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub key: CandidateKey,
    /// Number of parts, reference included.
    pub parts: usize,
    /// Summed coverage over all neighborhoods.
    pub coverage: f64,
    pub count: u32,
    /// `(neighborhood, coverage)` for every neighborhood it matched in.
    pub entries: Vec<(u32, f32)>,
}

/// Scored candidates over a set of neighborhoods.
#[derive(Debug, Clone, Default)]
pub struct CandidatePool {
    pub candidates: Vec<Candidate>,
    /// `(graph, center OR state)` of every neighborhood.
    pub neighborhoods: Vec<(u32, u32)>,
    /// Best coverage any candidate reaches per neighborhood.
    pub best: Vec<f32>,
}

impl CandidatePool {
    /// Build directly from candidates (neighborhood count inferred).
    pub fn from_candidates(candidates: Vec<Candidate>, neighborhoods: usize) -> Self {
        let mut best = vec![0f32; neighborhoods];
        for c in &candidates {
            for &(n, v) in &c.entries {
                best[n as usize] = best[n as usize].max(v);
            }
        }
        CandidatePool {
            candidates,
            neighborhoods: (0..neighborhoods as u32).map(|n| (0, n)).collect(),
            best,
        }
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn mean_best(&self) -> f64 {
        if self.best.is_empty() {
            0.0
        } else {
            self.best.iter().map(|&b| b as f64).sum::<f64>() / self.best.len() as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct EnumerationParams {
    /// Neighborhood radius in grid units of the layer below.
    pub radius: u32,
    pub tau: f64,
    pub aggregation: Aggregation,
    pub max_overlap: f64,
    /// Best duplet matches kept per neighborhood.
    pub max_matches: usize,
    /// Part limit, reference included.
    pub max_parts: usize,
    /// Centers per graph; more are subsampled at a uniform stride.
    pub center_cap: usize,
}

/// Existing compositions of the layer being learned, scored by inference.
pub struct Existing<'a> {
    pub engine: &'a Engine,
    pub layer: usize,
    /// Composition ids per anchoring OR id of the layer below.
    pub by_anchor: BTreeMap<u32, Vec<u32>>,
    pub parts: Vec<usize>,
}

struct Match {
    duplet: u32,
    state: u32,
    score: f64,
}

fn centers(layer: &GraphLayer, cap: usize) -> Vec<u32> {
    let n = layer.ors.len();
    if n <= cap {
        (0..n as u32).collect()
    } else {
        (0..cap).map(|i| (i * n / cap) as u32).collect()
    }
}

/// Support union of all OR states within `radius` of `center`.
pub fn neighborhood_support(layer: &GraphLayer, center: &State, radius: u32) -> Vec<u32> {
    let r = radius as i32;
    let mut parts: Vec<&[u32]> = Vec::new();
    for (_, si) in layer.index.in_square(center.loc[0], center.loc[1], r) {
        let s = &layer.ors[si as usize];
        let dx = s.loc[0] - center.loc[0];
        let dy = s.loc[1] - center.loc[1];
        if dx * dx + dy * dy <= r * r {
            parts.push(&s.support);
        }
    }
    merge_supports(&parts)
}

fn coverage(support: &[u32], neighborhood: &[u32]) -> f32 {
    let inter = intersection_size(support, neighborhood);
    let union = support.len() + neighborhood.len() - inter;
    if union == 0 {
        0.0
    } else {
        (inter as f64 / union as f64) as f32
    }
}

/// Score every candidate composition of layer `below + 1` in every
/// neighborhood of the layer-`below` states of `graphs`.
///
/// In each neighborhood the center is the reference part. For each duplet
/// anchored at the center's OR id the best second-part state is found; matches
/// scoring above `tau` whose support overlaps the center's less than
/// `max_overlap` are kept, best `max_matches` first. Every subset of kept
/// matches whose second parts pairwise overlap less than `max_overlap` is a
/// candidate, credited with the IoU of its support and the neighborhood's.
pub fn enumerate_candidates(
    graphs: &[&InferenceGraph],
    below: usize,
    duplets: &[Duplet],
    params: &EnumerationParams,
    existing: Option<&Existing>,
) -> Result<CandidatePool> {
    let m2 = window_m2(params.tau, params.aggregation, 2);
    let mut windows = Vec::with_capacity(duplets.len());
    for d in duplets {
        windows.push(d.geometry.window(m2)?);
    }
    let mut by_ref: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, d) in duplets.iter().enumerate() {
        by_ref.entry(d.reference).or_default().push(i);
    }
    let max_subset = params.max_parts.saturating_sub(1).max(1);

    type Emitted = Vec<(CandidateKey, usize, u32, f32)>;
    let per_graph: Vec<(Emitted, Vec<u32>)> = graphs
        .par_iter()
        .map(|g| {
            let mut out: Emitted = Vec::new();
            if g.depth() < below {
                return (out, Vec::new());
            }
            let layer = g.layer(below);
            let cs = centers(layer, params.center_cap);
            for (local, &ci) in cs.iter().enumerate() {
                let c = &layer.ors[ci as usize];
                let hood = neighborhood_support(layer, c, params.radius);

                let mut matches: Vec<Match> = Vec::new();
                for &di in by_ref.get(&c.id).map(|v| v.as_slice()).unwrap_or(&[]) {
                    let d = &duplets[di];
                    let mut best = 0.0;
                    let mut arg = None;
                    for &(off, dv) in &windows[di] {
                        if let Some(si) = layer.index.at(d.other, c.loc[0] + off[0], c.loc[1] + off[1]) {
                            if si == ci {
                                continue;
                            }
                            let v = layer.ors[si as usize].score * dv;
                            if v > best {
                                best = v;
                                arg = Some(si);
                            }
                        }
                    }
                    let Some(si) = arg else { continue };
                    let score = match params.aggregation {
                        Aggregation::Product => c.score * best,
                        Aggregation::GeometricMean => (c.score * best).sqrt(),
                    };
                    if score <= params.tau {
                        continue;
                    }
                    if overlap(&c.support, &layer.ors[si as usize].support) >= params.max_overlap {
                        continue;
                    }
                    matches.push(Match {
                        duplet: d.id,
                        state: si,
                        score,
                    });
                }
                matches.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.duplet.cmp(&b.duplet)));
                matches.truncate(params.max_matches);

                let k = matches.len();
                let mut compatible = vec![true; k * k];
                for i in 0..k {
                    for j in (i + 1)..k {
                        let a = &layer.ors[matches[i].state as usize].support;
                        let b = &layer.ors[matches[j].state as usize].support;
                        let ok = matches[i].state != matches[j].state
                            && overlap(a, b) < params.max_overlap;
                        compatible[i * k + j] = ok;
                        compatible[j * k + i] = ok;
                    }
                }
                for mask in 1u32..(1u32 << k) {
                    if mask.count_ones() as usize > max_subset {
                        continue;
                    }
                    let members: Vec<usize> = (0..k).filter(|&i| mask & (1 << i) != 0).collect();
                    let tree = members.iter().enumerate().all(|(a, &i)| {
                        members[a + 1..].iter().all(|&j| compatible[i * k + j])
                    });
                    if !tree {
                        continue;
                    }
                    let mut parts: Vec<&[u32]> = vec![&c.support];
                    let mut ids: Vec<u32> = Vec::with_capacity(members.len());
                    for &i in &members {
                        parts.push(&layer.ors[matches[i].state as usize].support);
                        ids.push(matches[i].duplet);
                    }
                    ids.sort_unstable();
                    let cov = coverage(&merge_supports(&parts), &hood);
                    out.push((
                        CandidateKey::New {
                            reference: c.id,
                            duplets: ids,
                        },
                        members.len() + 1,
                        local as u32,
                        cov,
                    ));
                }

                if let Some(ex) = existing {
                    for &comp in ex.by_anchor.get(&c.id).map(|v| v.as_slice()).unwrap_or(&[]) {
                        if let Some(s) = ex.engine.score_at(ex.layer, comp, c.loc, layer, params.tau) {
                            let parts: Vec<&[u32]> = s
                                .children
                                .iter()
                                .map(|&i| &*layer.ors[i as usize].support)
                                .collect();
                            let cov = coverage(&merge_supports(&parts), &hood);
                            out.push((
                                CandidateKey::Existing(comp),
                                ex.parts[comp as usize],
                                local as u32,
                                cov,
                            ));
                        }
                    }
                }
            }
            (out, cs)
        })
        .collect();

    let mut pool = CandidatePool::default();
    let mut index: BTreeMap<CandidateKey, usize> = BTreeMap::new();
    let mut raw: Vec<(CandidateKey, usize, u32, f32)> = Vec::new();
    for (gi, (emitted, cs)) in per_graph.into_iter().enumerate() {
        let base = pool.neighborhoods.len() as u32;
        pool.neighborhoods
            .extend(cs.iter().map(|&c| (gi as u32, c)));
        raw.extend(emitted.into_iter().map(|(k, p, n, v)| (k, p, base + n, v)));
    }
    // canonical candidate order, independent of discovery order
    for (key, parts, _, _) in &raw {
        if !index.contains_key(key) {
            index.insert(key.clone(), 0);
            pool.candidates.push(Candidate {
                key: key.clone(),
                parts: *parts,
                coverage: 0.0,
                count: 0,
                entries: Vec::new(),
            });
        }
    }
    pool.candidates.sort_by(|a, b| a.key.cmp(&b.key));
    for (i, c) in pool.candidates.iter().enumerate() {
        index.insert(c.key.clone(), i);
    }
    pool.best = vec![0.0; pool.neighborhoods.len()];
    for (key, _, n, cov) in raw {
        let c = &mut pool.candidates[index[&key]];
        c.coverage += cov as f64;
        c.count += 1;
        c.entries.push((n, cov));
        let b = &mut pool.best[n as usize];
        *b = b.max(cov);
    }
    Ok(pool)
}
