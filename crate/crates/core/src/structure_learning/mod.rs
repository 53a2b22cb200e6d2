//! Learning the compositions of one layer from parsed images.
//!
//! Offsets between co-occurring OR states of the layer below are histogrammed
//! per OR pair; histogram modes become duplets (reference, other, Gaussian).
//! Candidate compositions combine duplets sharing a reference and are scored
//! by how well their support covers each neighborhood. A greedy pass and a
//! Metropolis-Hastings refinement then pick a compact set.

mod candidates;
mod histogram;
mod select;

use std::collections::BTreeMap;

use rand::Rng;

pub use candidates::{
    enumerate_candidates, neighborhood_support, Candidate, CandidateKey, CandidatePool,
    EnumerationParams, Existing,
};
pub use histogram::{
    accumulate_histograms, extract_duplets, find_modes, Duplet, Histograms, PairHistogram,
};
pub use select::{
    best_f_measure, greedy_select, mcmc_refine, nms, objective, parts_penalty, select_object_layer,
    GreedyParams, McmcParams, ScoredBox,
};

use crate::config::Config;
use crate::error::Result;
use crate::inference::{Engine, InferenceGraph};
use crate::vocabulary::{Appearance, Composition, Layer, OrComposition, Part, Polarity, Vocabulary};

/// Number of common elements of two ascending slices.
pub fn intersection_size(a: &[u32], b: &[u32]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// IoU of two ascending support sets; 0 when both are empty.
pub fn overlap(a: &[u32], b: &[u32]) -> f64 {
    let inter = intersection_size(a, b);
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Summary of one layer-learning run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerReport {
    pub layer: usize,
    pub duplets: usize,
    pub candidates: usize,
    pub neighborhoods: usize,
    /// Compositions added to the layer.
    pub added: Vec<u32>,
    /// Existing compositions that matched at least once.
    pub reused: Vec<u32>,
    pub greedy_objective: f64,
    pub final_objective: f64,
}

/// Enumerate and score candidates for `layer` from graphs parsed up to
/// `layer - 1`. Existing compositions of `layer` compete as candidates.
pub fn candidate_pool(
    vocab: &Vocabulary,
    graphs: &[&InferenceGraph],
    layer: usize,
    config: &Config,
) -> Result<(Vec<Duplet>, CandidatePool)> {
    let below = layer - 1;
    let radius = config.layers.radius(layer);
    let lc = &config.learning;
    let hists = accumulate_histograms(graphs, below, radius, lc.max_overlap);
    let duplets = extract_duplets(&hists, layer, lc);
    let params = EnumerationParams {
        radius,
        tau: config.inference.tau,
        aggregation: vocab.aggregation,
        max_overlap: lc.max_overlap,
        max_matches: if layer >= config.layers.object_layer {
            lc.max_object_duplet_matches
        } else {
            lc.max_duplet_matches
        },
        max_parts: lc.max_parts,
        center_cap: lc.center_cap,
    };
    let pool = if vocab.depth() >= layer && !vocab.layer(layer).compositions.is_empty() {
        let engine = Engine::new(vocab)?;
        let comps = &vocab.layer(layer).compositions;
        let mut by_anchor: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        for c in comps {
            for or in c.parts[0].appearance.ids() {
                by_anchor.entry(or).or_default().push(c.id);
            }
        }
        let existing = Existing {
            engine: &engine,
            layer,
            by_anchor,
            parts: comps.iter().map(|c| c.normal_parts()).collect(),
        };
        enumerate_candidates(graphs, below, &duplets, &params, Some(&existing))?
    } else {
        enumerate_candidates(graphs, below, &duplets, &params, None)?
    };
    Ok((duplets, pool))
}

/// Selection over a pool: greedy, then MCMC refinement. Existing
/// compositions in the pool are kept fixed. Returns the selected candidate
/// indices (ascending) and the greedy and final objectives.
pub fn select_candidates<R: Rng>(
    pool: &CandidatePool,
    config: &Config,
    rng: &mut R,
) -> (Vec<usize>, f64, f64) {
    let lc = &config.learning;
    let penalty = parts_penalty(pool, lc.parts_penalty);
    let fixed: Vec<usize> = (0..pool.len())
        .filter(|&c| matches!(pool.candidates[c].key, CandidateKey::Existing(_)))
        .collect();
    let greedy = greedy_select(
        pool,
        &GreedyParams {
            penalty,
            slack: lc.slack,
            stop_fraction: lc.stop_fraction,
            max_count: lc.max_compositions,
        },
        &fixed,
    );
    log::debug!("greedy picked {} of {} candidates", greedy.len(), pool.len());
    let mut start = fixed.clone();
    start.extend(&greedy);
    start.sort_unstable();
    let g = objective(pool, &start, penalty);
    let refined = mcmc_refine(
        pool,
        &start,
        &fixed,
        &McmcParams {
            penalty,
            beta: lc.beta,
            iterations: lc.mcmc_iterations,
            move_mix: lc.move_mix,
            add_floor: lc.polish_add_floor,
        },
        rng,
    );
    let f = objective(pool, &refined, penalty);
    (refined, g, f)
}

/// Turn a new candidate into composition parts.
pub fn candidate_parts(key: &CandidateKey, duplets: &[Duplet], epsilon: f64) -> Option<Vec<Part>> {
    match key {
        CandidateKey::Existing(_) => None,
        CandidateKey::New { reference, duplets: ids } => {
            let mut parts = vec![Part::reference(*reference, epsilon)];
            for &d in ids {
                let d = &duplets[d as usize];
                parts.push(Part::normal(d.other, d.geometry));
            }
            Some(parts)
        }
    }
}

/// Add repulsive parts to nested compositions: when the duplets of `a` are a
/// strict subset of those of `b` (same reference), `a` gains a repulsive
/// part for each duplet only `b` has, up to `max_parts` parts.
pub fn repulsive_parts(
    selected: &[&CandidateKey],
    duplets: &[Duplet],
    max_parts: usize,
) -> Vec<Vec<Part>> {
    selected
        .iter()
        .map(|a| {
            let CandidateKey::New { reference: ra, duplets: da } = a else {
                return Vec::new();
            };
            let mut extra: Vec<u32> = Vec::new();
            for b in selected {
                let CandidateKey::New { reference: rb, duplets: db } = b else {
                    continue;
                };
                if rb != ra || db.len() <= da.len() || !da.iter().all(|d| db.contains(d)) {
                    continue;
                }
                extra.extend(db.iter().filter(|d| !da.contains(d)));
            }
            extra.sort_unstable();
            extra.dedup();
            extra.truncate(max_parts.saturating_sub(da.len() + 1));
            extra
                .into_iter()
                .map(|d| {
                    let d = &duplets[d as usize];
                    Part {
                        appearance: Appearance::one_hot(d.other),
                        geometry: d.geometry,
                        polarity: Polarity::Repulsive,
                    }
                })
                .collect()
        })
        .collect()
}

/// Learn (or extend) layer `layer` of `vocab` from graphs parsed up to
/// `layer - 1`. New compositions are appended with singleton OR nodes.
pub fn learn_layer<R: Rng>(
    vocab: &mut Vocabulary,
    graphs: &[&InferenceGraph],
    layer: usize,
    config: &Config,
    rng: &mut R,
) -> Result<LayerReport> {
    assert!(layer >= 2 && layer <= vocab.depth() + 1, "layer {layer} cannot be learned");
    let (duplets, pool) = candidate_pool(vocab, graphs, layer, config)?;
    let (selected, g, f) = select_candidates(&pool, config, rng);
    log::info!(
        "layer {layer}: {} duplets, {} candidates over {} neighborhoods, {} selected (objective {g:.2} -> {f:.2})",
        duplets.len(),
        pool.len(),
        pool.neighborhoods.len(),
        selected.len()
    );
    if vocab.depth() < layer {
        vocab.layers.push(Layer::empty(
            layer,
            config.layers.radius(layer),
            config.layers.rho(layer),
            config.inference.tau,
        ));
    }
    let keys: Vec<&CandidateKey> = selected.iter().map(|&c| &pool.candidates[c].key).collect();
    let repulsive = if config.learning.repulsive_rule {
        repulsive_parts(&keys, &duplets, config.learning.max_parts)
    } else {
        vec![Vec::new(); keys.len()]
    };
    let mut report = LayerReport {
        layer,
        duplets: duplets.len(),
        candidates: pool.len(),
        neighborhoods: pool.neighborhoods.len(),
        greedy_objective: g,
        final_objective: f,
        ..Default::default()
    };
    let epsilon = vocab.epsilon;
    let target = vocab.layer_mut(layer);
    for (key, rep) in keys.into_iter().zip(repulsive) {
        match candidate_parts(key, &duplets, epsilon) {
            None => {
                if let CandidateKey::Existing(id) = key {
                    report.reused.push(*id);
                }
            }
            Some(mut parts) => {
                parts.extend(rep);
                let id = target.compositions.len() as u32;
                target.compositions.push(Composition::new(id, layer, parts));
                let or = target.or_nodes.len() as u32;
                target.or_nodes.push(OrComposition {
                    id: or,
                    layer,
                    members: vec![id],
                });
                report.added.push(id);
            }
        }
    }
    Ok(report)
}
