use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::Rng;

use super::candidates::CandidatePool;
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

/// Learning objective of a selection: summed best coverage per
/// neighborhood minus `penalty` times the total part count.
pub fn objective(pool: &CandidatePool, selected: &[usize], penalty: f64) -> f64 {
    let mut best = vec![0f32; pool.best.len()];
    let mut parts = 0usize;
    for &c in selected {
        let cand = &pool.candidates[c];
        parts += cand.parts;
        for &(n, v) in &cand.entries {
            let b = &mut best[n as usize];
            if v > *b {
                *b = v;
            }
        }
    }
    best.iter().map(|&b| b as f64).sum::<f64>() - penalty * parts as f64
}

/// Parts penalty: `fraction` of the mean best neighborhood coverage.
pub fn parts_penalty(pool: &CandidatePool, fraction: f64) -> f64 {
    fraction * pool.mean_best()
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Gain(f64, usize);

impl Eq for Gain {}

impl PartialOrd for Gain {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Gain {
    fn cmp(&self, other: &Self) -> Ordering {
        // larger gain first, then lower index
        self.0.total_cmp(&other.0).then(other.1.cmp(&self.1))
    }
}

fn residual_gain(pool: &CandidatePool, c: usize, best: &[f32], slack: f64, penalty: f64) -> f64 {
    let cand = &pool.candidates[c];
    let mut g = 0.0;
    for &(n, v) in &cand.entries {
        let r = v as f64 - best[n as usize] as f64;
        if r >= slack {
            g += r;
        }
    }
    g - penalty * cand.parts as f64
}

#[derive(Debug, Clone)]
pub struct GreedyParams {
    pub penalty: f64,
    /// Neighborhood entries whose residual coverage falls below this are dropped.
    pub slack: f64,
    /// Stop once the best gain falls below this fraction of the first one.
    pub stop_fraction: f64,
    pub max_count: usize,
}

/// Greedy selection by residual coverage gain minus the parts penalty.
///
/// `preselected` candidates are taken as already chosen (incremental
/// learning); the stop threshold is still relative to the best gain on the
/// empty selection. Returns newly selected candidates in selection order.
pub fn greedy_select(pool: &CandidatePool, params: &GreedyParams, preselected: &[usize]) -> Vec<usize> {
    let zero = vec![0f32; pool.best.len()];
    let mut best = zero.clone();
    let mut heap: BinaryHeap<Gain> = (0..pool.len())
        .map(|c| Gain(residual_gain(pool, c, &zero, params.slack, params.penalty), c))
        .collect();
    let first = heap.peek().map(|g| g.0).unwrap_or(0.0);
    if first <= 0.0 {
        if pool.is_empty() {
            log::warn!("empty candidate pool");
        }
        return Vec::new();
    }
    let stop = params.stop_fraction * first;
    let mut taken = vec![false; pool.len()];
    for &c in preselected {
        taken[c] = true;
        for &(n, v) in &pool.candidates[c].entries {
            best[n as usize] = best[n as usize].max(v);
        }
    }
    let mut chosen = Vec::new();
    while chosen.len() < params.max_count {
        let Some(Gain(_, c)) = heap.pop() else { break };
        if taken[c] {
            continue;
        }
        let g = residual_gain(pool, c, &best, params.slack, params.penalty);
        if let Some(next) = heap.peek() {
            if Gain(g, c) < *next {
                heap.push(Gain(g, c));
                continue;
            }
        }
        if g < stop || g <= 0.0 {
            break;
        }
        taken[c] = true;
        chosen.push(c);
        for &(n, v) in &pool.candidates[c].entries {
            best[n as usize] = best[n as usize].max(v);
        }
    }
    chosen
}

/// Incrementally maintained objective for a selection.
struct Tracker<'a> {
    pool: &'a CandidatePool,
    penalty: f64,
    selected: Vec<bool>,
    /// Selected `(candidate, coverage)` per neighborhood.
    per_n: Vec<Vec<(u32, f32)>>,
    best: Vec<f32>,
    value: f64,
}

impl<'a> Tracker<'a> {
    fn new(pool: &'a CandidatePool, penalty: f64) -> Self {
        Tracker {
            pool,
            penalty,
            selected: vec![false; pool.len()],
            per_n: vec![Vec::new(); pool.best.len()],
            best: vec![0.0; pool.best.len()],
            value: 0.0,
        }
    }

    fn add_delta(&self, c: usize) -> f64 {
        let cand = &self.pool.candidates[c];
        let mut d = -self.penalty * cand.parts as f64;
        for &(n, v) in &cand.entries {
            let b = self.best[n as usize];
            if v > b {
                d += v as f64 - b as f64;
            }
        }
        d
    }

    fn remove_delta(&self, c: usize) -> f64 {
        let cand = &self.pool.candidates[c];
        let mut d = self.penalty * cand.parts as f64;
        for &(n, v) in &cand.entries {
            let b = self.best[n as usize];
            if v >= b {
                let second = self.per_n[n as usize]
                    .iter()
                    .filter(|e| e.0 as usize != c)
                    .map(|e| e.1)
                    .fold(0f32, f32::max);
                d += second as f64 - b as f64;
            }
        }
        d
    }

    fn add(&mut self, c: usize) {
        self.value += self.add_delta(c);
        self.selected[c] = true;
        for &(n, v) in &self.pool.candidates[c].entries {
            self.per_n[n as usize].push((c as u32, v));
            let b = &mut self.best[n as usize];
            if v > *b {
                *b = v;
            }
        }
    }

    fn remove(&mut self, c: usize) {
        self.value += self.remove_delta(c);
        self.selected[c] = false;
        for &(n, _) in &self.pool.candidates[c].entries {
            let list = &mut self.per_n[n as usize];
            list.retain(|e| e.0 as usize != c);
            self.best[n as usize] = list.iter().map(|e| e.1).fold(0f32, f32::max);
        }
    }

    fn selection(&self) -> Vec<usize> {
        (0..self.selected.len()).filter(|&c| self.selected[c]).collect()
    }
}

#[derive(Debug, Clone)]
pub struct McmcParams {
    pub penalty: f64,
    pub beta: f64,
    pub iterations: usize,
    /// Exchange / add / remove probabilities.
    pub move_mix: [f64; 3],
    /// Polish additions must gain this fraction of the current objective.
    pub add_floor: f64,
}

/// Metropolis-Hastings refinement of a selection.
///
/// Moves exchange, add or remove one candidate (`fixed` ones are never
/// touched); a move changing the objective by `delta` is accepted with
/// probability `min(1, beta^delta)`. The best selection visited is then
/// polished by improving exchanges and removals, plus additions gaining at
/// least `add_floor` times the current objective. The
/// returned selection (fixed candidates included, ascending) never scores
/// below `start`.
pub fn mcmc_refine<R: Rng>(
    pool: &CandidatePool,
    start: &[usize],
    fixed: &[usize],
    params: &McmcParams,
    rng: &mut R,
) -> Vec<usize> {
    let mut t = Tracker::new(pool, params.penalty);
    let mut is_fixed = vec![false; pool.len()];
    for &c in fixed {
        is_fixed[c] = true;
        if !t.selected[c] {
            t.add(c);
        }
    }
    for &c in start {
        if !t.selected[c] {
            t.add(c);
        }
    }
    let movable: Vec<usize> = (0..pool.len()).filter(|&c| !is_fixed[c]).collect();
    let mut best_sel = t.selection();
    let mut best_val = objective(pool, &best_sel, params.penalty);
    let total: f64 = params.move_mix.iter().sum();

    for _ in 0..params.iterations {
        if movable.is_empty() {
            break;
        }
        let inside: Vec<usize> = movable.iter().copied().filter(|&c| t.selected[c]).collect();
        let outside: Vec<usize> = movable.iter().copied().filter(|&c| !t.selected[c]).collect();
        let u = rng.random::<f64>() * total;
        let before = t.value;
        // (removed, added)
        let mv: (Option<usize>, Option<usize>) = if u < params.move_mix[0] {
            if inside.is_empty() || outside.is_empty() {
                continue;
            }
            let r = inside[rng.random_range(0..inside.len())];
            let a = outside[rng.random_range(0..outside.len())];
            (Some(r), Some(a))
        } else if u < params.move_mix[0] + params.move_mix[1] {
            if outside.is_empty() {
                continue;
            }
            (None, Some(outside[rng.random_range(0..outside.len())]))
        } else {
            if inside.is_empty() {
                continue;
            }
            (Some(inside[rng.random_range(0..inside.len())]), None)
        };
        if let Some(r) = mv.0 {
            t.remove(r);
        }
        if let Some(a) = mv.1 {
            t.add(a);
        }
        let delta = t.value - before;
        let accept = delta >= 0.0 || rng.random::<f64>() < params.beta.powf(delta);
        if accept {
            if t.value > best_val + 1e-9 {
                let sel = t.selection();
                let exact = objective(pool, &sel, params.penalty);
                if exact > best_val {
                    best_val = exact;
                    best_sel = sel;
                }
            }
        } else {
            if let Some(a) = mv.1 {
                t.remove(a);
            }
            if let Some(r) = mv.0 {
                t.add(r);
            }
        }
    }

    // polish the best state visited with improving exchanges and removals
    let mut t = Tracker::new(pool, params.penalty);
    for &c in &best_sel {
        t.add(c);
    }
    let mut by_neighborhood: Vec<Vec<u32>> = vec![Vec::new(); pool.neighborhoods.len()];
    for (c, cand) in pool.candidates.iter().enumerate() {
        for &(n, _) in &cand.entries {
            by_neighborhood[n as usize].push(c as u32);
        }
    }
    let mut stamp = vec![usize::MAX; pool.len()];
    loop {
        let inside: Vec<usize> = movable.iter().copied().filter(|&c| t.selected[c]).collect();
        // an exchange with a candidate sharing no neighborhood with the
        // removed one gains the two deltas taken separately
        let mut adds: Vec<(f64, usize)> = movable
            .iter()
            .copied()
            .filter(|&a| !t.selected[a])
            .map(|a| (t.add_delta(a), a))
            .collect();
        adds.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
        let mut best_move: Option<(f64, Option<usize>, Option<usize>)> = None;
        let consider = |d: f64, r: Option<usize>, a: Option<usize>, best: &mut Option<(f64, Option<usize>, Option<usize>)>| {
            if d > 1e-9 && best.is_none_or(|b| d > b.0) {
                *best = Some((d, r, a));
            }
        };
        for &r in &inside {
            consider(t.remove_delta(r), Some(r), None, &mut best_move);
        }
        if let Some(&(d, a)) = adds.first() {
            if d >= params.add_floor * t.value.abs() {
                consider(d, None, Some(a), &mut best_move);
            }
        }
        for &r in &inside {
            let mut near: Vec<usize> = Vec::new();
            for &(n, _) in &pool.candidates[r].entries {
                for &a in &by_neighborhood[n as usize] {
                    if stamp[a as usize] != r {
                        stamp[a as usize] = r;
                        near.push(a as usize);
                    }
                }
            }
            near.sort_unstable();
            let before = t.value;
            t.remove(r);
            let removed = t.value - before;
            for &a in &near {
                if !is_fixed[a] && !t.selected[a] && a != r {
                    consider(removed + t.add_delta(a), Some(r), Some(a), &mut best_move);
                }
            }
            if let Some(&(d, a)) = adds.iter().find(|&&(_, a)| stamp[a] != r) {
                consider(removed + d, Some(r), Some(a), &mut best_move);
            }
            t.add(r);
        }
        let Some((_, r, a)) = best_move else { break };
        if let Some(r) = r {
            t.remove(r);
        }
        if let Some(a) = a {
            t.add(a);
        }
        stamp.fill(usize::MAX);
    }
    let sel = t.selection();
    if objective(pool, &sel, params.penalty) >= best_val {
        sel
    } else {
        best_sel
    }
}

/// A scored box reported by a candidate detector on one image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub score: f64,
}

/// Greedy suppression: boxes sorted by score, a box is dropped when it
/// overlaps a kept one by more than `max_iou`.
pub fn nms(mut boxes: Vec<ScoredBox>, max_iou: f64) -> Vec<ScoredBox> {
    boxes.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept: Vec<ScoredBox> = Vec::new();
    for b in boxes {
        if kept.iter().all(|k| iou(&k.bbox, &b.bbox) <= max_iou) {
            kept.push(b);
        }
    }
    kept
}

/// Best F-measure over score thresholds of per-image detections against
/// truth boxes (each truth matched at most once, highest scores first).
pub fn best_f_measure(dets: &[Vec<ScoredBox>], truth: &[Vec<BBox>], min_iou: f64) -> f64 {
    let total: usize = truth.iter().map(|t| t.len()).sum();
    if total == 0 {
        return 0.0;
    }
    let mut all: Vec<(f64, usize, usize)> = dets
        .iter()
        .enumerate()
        .flat_map(|(i, d)| d.iter().enumerate().map(move |(k, b)| (b.score, i, k)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut matched: Vec<Vec<bool>> = truth.iter().map(|t| vec![false; t.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut best = 0.0;
    for (idx, &(score, i, k)) in all.iter().enumerate() {
        let b = &dets[i][k].bbox;
        let mut arg = None;
        let mut best_iou = min_iou;
        for (j, t) in truth[i].iter().enumerate() {
            let v = iou(b, t);
            if !matched[i][j] && v >= best_iou {
                best_iou = v;
                arg = Some(j);
            }
        }
        match arg {
            Some(j) => {
                matched[i][j] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        // evaluate only at distinct thresholds
        if all.get(idx + 1).is_none_or(|n| n.0 < score) {
            let p = tp as f64 / (tp + fp) as f64;
            let r = tp as f64 / total as f64;
            if p + r > 0.0 {
                best = f64::max(best, 2.0 * p * r / (p + r));
            }
        }
    }
    best
}

/// Greedy choice of object-layer compositions by detection F-measure.
///
/// `detections[c][i]` are candidate `c`'s boxes on validation image `i`.
/// Candidates are added while the F-measure of the union (after
/// suppression at `nms_iou`) grows by at least `gain_floor`. Returns the
/// chosen candidates and the final F-measure.
pub fn select_object_layer(
    detections: &[Vec<Vec<ScoredBox>>],
    truth: &[Vec<BBox>],
    min_iou: f64,
    nms_iou: f64,
    gain_floor: f64,
) -> Result<(Vec<usize>, f64)> {
    if truth.iter().all(|t| t.is_empty()) {
        return Err(Error::NoPositives("validation set has no boxes".into()));
    }
    let images = truth.len();
    let mut chosen: Vec<usize> = Vec::new();
    let mut current = 0.0;
    let f_of = |set: &[usize]| {
        let merged: Vec<Vec<ScoredBox>> = (0..images)
            .map(|i| {
                let all: Vec<ScoredBox> = set
                    .iter()
                    .flat_map(|&c| detections[c].get(i).into_iter().flatten().copied())
                    .collect();
                nms(all, nms_iou)
            })
            .collect();
        best_f_measure(&merged, truth, min_iou)
    };
    loop {
        let mut best: Option<(f64, usize)> = None;
        for c in 0..detections.len() {
            if chosen.contains(&c) {
                continue;
            }
            let mut trial = chosen.clone();
            trial.push(c);
            let f = f_of(&trial);
            if best.is_none_or(|b| f > b.0) {
                best = Some((f, c));
            }
        }
        match best {
            Some((f, c)) if f - current >= gain_floor => {
                chosen.push(c);
                current = f;
            }
            _ => break,
        }
    }
    Ok((chosen, current))
}
