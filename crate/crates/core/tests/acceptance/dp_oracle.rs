//! Brute-force reference for inference on small random vocabularies.
//!
//! Every composition state is recomputed by enumerating every combination
//! of part assignments over all states of the layer below (no windows, no
//! index, no bound pruning), then downsampled and pooled naively.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use shapehier::config::Aggregation;
use shapehier::features::{FeatureSet, OrientedFeature};
use shapehier::vocabulary::{Appearance, Composition, EdgeModel, Layer, OrComposition, Part, Polarity};
use shapehier::{Config, Engine, Gaussian2, Vocabulary};

/// `(layer, id, x, y)` of a state.
pub type Key = (usize, u32, i32, i32);

pub struct Instance {
    pub vocab: Vocabulary,
    pub features: FeatureSet,
}

fn random_gaussian(rng: &mut ChaCha8Rng, max_mean: f64) -> Gaussian2 {
    let r = rng.random_range(0.0..max_mean);
    let a = rng.random_range(0.0..std::f64::consts::TAU);
    let (s1, s2) = (rng.random_range(0.5..4.0), rng.random_range(0.5..4.0));
    let t = rng.random_range(0.0..std::f64::consts::PI);
    let (c, s) = (t.cos(), t.sin());
    let cov = [
        [c * c * s1 + s * s * s2, c * s * (s1 - s2)],
        [c * s * (s1 - s2), s * s * s1 + c * c * s2],
    ];
    Gaussian2::new([r * a.cos(), r * a.sin()], cov).expect("positive definite")
}

fn random_layer(rng: &mut ChaCha8Rng, l: usize, below_ors: usize, epsilon: f64, config: &Config) -> Layer {
    let radius = 6;
    let rho = if rng.random_bool(0.5) { 1.0 } else { 0.5 };
    let tau = rng.random_range(0.002..config.inference.tau);
    let mut layer = Layer::empty(l, radius, rho, tau);
    let n = rng.random_range(2..=4);
    for id in 0..n {
        let mut parts = vec![Part::reference(rng.random_range(0..below_ors as u32), epsilon)];
        for _ in 0..rng.random_range(1..=2) {
            parts.push(Part::normal(rng.random_range(0..below_ors as u32), random_gaussian(rng, 4.0)));
        }
        if rng.random_bool(0.25) {
            parts.push(Part {
                appearance: Appearance::one_hot(rng.random_range(0..below_ors as u32)),
                geometry: random_gaussian(rng, 4.0),
                polarity: Polarity::Repulsive,
            });
        }
        let mut c = Composition::new(id, l, parts);
        if rng.random_bool(0.2) {
            c.threshold = Some(rng.random_range(0.05..0.3));
        }
        layer.compositions.push(c);
    }
    // random partition into OR nodes, members ascending
    let groups = rng.random_range(1..=n);
    let mut members: Vec<Vec<u32>> = vec![Vec::new(); groups as usize];
    for id in 0..n {
        let g = if (id as usize) < groups as usize { id as usize } else { rng.random_range(0..groups as usize) };
        members[g].push(id);
    }
    members.sort();
    for (i, m) in members.into_iter().enumerate() {
        layer.or_nodes.push(OrComposition { id: i as u32, layer: l, members: m });
    }
    layer
}

pub fn random_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = Config::default();
    let mut vocab = Vocabulary::new(&config);
    vocab.aggregation = if rng.random_bool(0.5) { Aggregation::Product } else { Aggregation::GeometricMean };
    let n = vocab.orientations;
    vocab.edge_models = (0..n)
        .map(|o| {
            let mut mean = vec![0.0; n];
            for (i, m) in mean.iter_mut().enumerate() {
                let d = (i as isize - o as isize).rem_euclid(n as isize).min((o as isize - i as isize).rem_euclid(n as isize));
                *m = (1.0 - 0.45 * d as f64).max(0.0);
            }
            let mut cov = vec![0.0; n * n];
            for i in 0..n {
                cov[i * n + i] = rng.random_range(0.05..0.2);
            }
            EdgeModel { orientation: o, mean, cov, estimated: true }
        })
        .collect();
    vocab.layers[0].rho = if rng.random_bool(0.5) { 1.0 } else { 0.5 };
    let depth = rng.random_range(2..=3);
    for l in 2..=depth {
        let below = vocab.layers[l - 2].or_nodes.len();
        let layer = random_layer(&mut rng, l, below, vocab.epsilon, &config);
        vocab.layers.push(layer);
    }
    let (w, h) = (16usize, 16usize);
    let count = rng.random_range(20..=50);
    let mut taken = std::collections::BTreeSet::new();
    let mut features = Vec::new();
    while features.len() < count {
        let (x, y) = (rng.random_range(0..w as u32), rng.random_range(0..h as u32));
        if !taken.insert((y, x)) {
            continue;
        }
        let dominant = rng.random_range(0..n);
        let energies: Vec<f32> = (0..n)
            .map(|i| if i == dominant { 1.0 } else { rng.random_range(0.0f32..0.95) })
            .collect();
        features.push(OrientedFeature { x, y, energies, dominant: dominant as u8 });
    }
    features.sort_by_key(|f| (f.y, f.x));
    Instance {
        vocab,
        features: FeatureSet { width: w, height: h, orientations: n, scale_index: 0, features },
    }
}

fn invert(cov: &[f64], n: usize) -> Vec<f64> {
    // Gauss-Jordan on [cov | I]
    let mut a: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut row = cov[i * n..(i + 1) * n].to_vec();
            row.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            row
        })
        .collect();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        let d = a[c][c];
        for v in a[c].iter_mut() {
            *v /= d;
        }
        for r in 0..n {
            if r != c {
                let f = a[r][c];
                let pivot = a[c].clone();
                for (v, pv) in a[r].iter_mut().zip(pivot) {
                    *v -= f * pv;
                }
            }
        }
    }
    a.into_iter().flat_map(|row| row[n..].to_vec()).collect()
}

fn gaussian_m2(g: &Gaussian2, d: [f64; 2]) -> f64 {
    let c = g.cov;
    let det = c[0][0] * c[1][1] - c[0][1] * c[1][0];
    let (x, y) = (d[0] - g.mean[0], d[1] - g.mean[1]);
    (c[1][1] * x * x - 2.0 * c[0][1] * x * y + c[0][0] * y * y) / det
}

fn window_limit(tau: f64, aggregation: Aggregation, parts: usize) -> f64 {
    match aggregation {
        Aggregation::Product => -2.0 * tau.ln(),
        Aggregation::GeometricMean => -2.0 * tau.ln() * parts as f64,
    }
}

/// Reference states: composition and OR states of every layer.
pub fn brute_force(inst: &Instance) -> (BTreeMap<Key, f64>, BTreeMap<Key, f64>) {
    let v = &inst.vocab;
    let n = v.orientations;
    let mut comps: BTreeMap<Key, f64> = BTreeMap::new();
    let mut ors: BTreeMap<Key, f64> = BTreeMap::new();
    // (or id, x, y, score) of the current layer's OR states
    let mut below: Vec<(u32, i32, i32, f64)> = Vec::new();
    for l in 1..=v.depth() {
        let layer = v.layer(l);
        let mut raw: Vec<(u32, i32, i32, f64)> = Vec::new();
        if l == 1 {
            for f in &inst.features.features {
                let m = f.energies[f.dominant as usize] as f64;
                let x: Vec<f64> = f.energies.iter().map(|&e| e as f64 / m).collect();
                for (k, e) in v.edge_models.iter().enumerate() {
                    let p = invert(&e.cov, n);
                    let d: Vec<f64> = x.iter().zip(&e.mean).map(|(a, b)| a - b).collect();
                    let mut q = 0.0;
                    for i in 0..n {
                        for j in 0..n {
                            q += d[i] * p[i * n + j] * d[j];
                        }
                    }
                    let s = (-0.5 * q).exp();
                    let t = layer.compositions[k].threshold.unwrap_or(0.0);
                    if s > layer.tau && s >= t {
                        raw.push((k as u32, f.x as i32, f.y as i32, s));
                    }
                }
            }
        } else {
            for c in &layer.compositions {
                let anchors_or = c.parts[0].appearance.primary().unwrap();
                let mut anchors: Vec<(i32, i32)> = below
                    .iter()
                    .filter(|s| s.0 == anchors_or)
                    .map(|s| (s.1, s.2))
                    .collect();
                anchors.sort_by_key(|a| (a.1, a.0));
                anchors.dedup();
                let limit = window_limit(layer.tau, v.aggregation, c.parts.len());
                for (ax, ay) in anchors {
                    // every normal part ranges over all OR states of its id
                    let mut choices: Vec<Vec<f64>> = Vec::new();
                    let mut repulsive = 1.0;
                    for p in &c.parts {
                        let id = p.appearance.primary().unwrap();
                        let cands = below.iter().filter(|s| s.0 == id);
                        if p.polarity == Polarity::Repulsive {
                            let present: Vec<f64> = cands
                                .filter(|s| gaussian_m2(&p.geometry, [(s.1 - ax) as f64, (s.2 - ay) as f64]) <= limit)
                                .map(|s| 1.0 - s.3)
                                .collect();
                            let f = present.into_iter().fold(None, |m: Option<f64>, x| Some(m.map_or(x, |m| m.max(x))));
                            repulsive *= v.alpha * f.unwrap_or(1.0);
                        } else {
                            choices.push(
                                cands
                                    .map(|s| {
                                        s.3 * (-0.5 * gaussian_m2(&p.geometry, [(s.1 - ax) as f64, (s.2 - ay) as f64])).exp()
                                    })
                                    .collect(),
                            );
                        }
                    }
                    if choices.iter().any(|c| c.is_empty()) {
                        continue;
                    }
                    // full Cartesian product of part assignments
                    let mut best = 0.0f64;
                    let mut idx = vec![0usize; choices.len()];
                    loop {
                        let prod: f64 = idx.iter().zip(&choices).map(|(&i, c)| c[i]).product::<f64>() * repulsive;
                        best = best.max(prod);
                        let mut k = 0;
                        while k < idx.len() {
                            idx[k] += 1;
                            if idx[k] < choices[k].len() {
                                break;
                            }
                            idx[k] = 0;
                            k += 1;
                        }
                        if k == idx.len() {
                            break;
                        }
                    }
                    let score = match v.aggregation {
                        Aggregation::Product => best,
                        Aggregation::GeometricMean => best.powf(1.0 / c.parts.len() as f64),
                    };
                    if score > layer.tau && score >= c.threshold.unwrap_or(0.0) {
                        raw.push((c.id, ax, ay, score));
                    }
                }
            }
        }
        // downsample: best per (id, cell)
        let rho = layer.rho;
        let mut cells: BTreeMap<(u32, i32, i32), f64> = BTreeMap::new();
        for (id, x, y, s) in raw {
            let key = (id, (x as f64 * rho).floor() as i32, (y as f64 * rho).floor() as i32);
            let e = cells.entry(key).or_insert(s);
            *e = e.max(s);
        }
        let mut pooled: BTreeMap<(u32, i32, i32), f64> = BTreeMap::new();
        for (&(id, x, y), &s) in &cells {
            comps.insert((l, id, x, y), s);
            let or = layer.or_nodes.iter().find(|o| o.members.contains(&id)).unwrap().id;
            let e = pooled.entry((or, x, y)).or_insert(s);
            *e = e.max(s);
        }
        below = pooled.iter().map(|(&(id, x, y), &s)| (id, x, y, s)).collect();
        for (&(id, x, y), &s) in &pooled {
            ors.insert((l, id, x, y), s);
        }
    }
    (comps, ors)
}

/// States of the engine's inference graph in the same form.
pub fn engine_states(inst: &Instance) -> (BTreeMap<Key, f64>, BTreeMap<Key, f64>) {
    let engine = Engine::new(&inst.vocab).expect("valid vocabulary");
    let g = engine.infer(&inst.features, inst.vocab.depth()).expect("inference");
    let mut comps = BTreeMap::new();
    let mut ors = BTreeMap::new();
    for l in 1..=g.depth() {
        for s in &g.layer(l).comps {
            comps.insert((l, s.id, s.loc[0], s.loc[1]), s.score);
        }
        for s in &g.layer(l).ors {
            ors.insert((l, s.id, s.loc[0], s.loc[1]), s.score);
        }
    }
    (comps, ors)
}

/// Largest relative difference between two state maps; `None` when their
/// key sets differ.
pub fn max_relative_error(a: &BTreeMap<Key, f64>, b: &BTreeMap<Key, f64>) -> Option<f64> {
    if a.len() != b.len() || a.keys().zip(b.keys()).any(|(x, y)| x != y) {
        return None;
    }
    Some(
        a.values()
            .zip(b.values())
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(f64::MIN_POSITIVE))
            .fold(0.0, f64::max),
    )
}
