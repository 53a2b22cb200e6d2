//! Randomized invariants of features, inference, vocabulary storage,
//! selection, shape matching and evaluation.

#[path = "acceptance/dp_oracle.rs"]
#[allow(dead_code)]
mod dp_oracle;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use proptest::prelude::*;
use proptest::test_runner::{Config as RunnerConfig, RngSeed};

use shapehier::eval::{class_curve, Detection, ImageTruth};
use shapehier::features::{argmax, build_gabor_bank, extract_features, orientation_energy, normal_step};
use shapehier::inference::{downsample, NodeKind, State};
use shapehier::multiclass::deg_share;
use shapehier::or_learning::{chi2, shape_context};
use shapehier::structure_learning::{
    greedy_select, mcmc_refine, objective, Candidate, CandidateKey, CandidatePool, GreedyParams, McmcParams,
};
use shapehier::synth::{render_strokes, Stroke};
use shapehier::vocabulary::{self, validate};
use shapehier::{iou, BBox, Config, Engine, Gaussian2, Plane};

fn runner(cases: u32) -> RunnerConfig {
    RunnerConfig {
        cases,
        failure_persistence: None,
        rng_seed: RngSeed::Fixed(0x5eed),
        ..RunnerConfig::default()
    }
}

fn stroke_image(size: usize, seed: u64) -> Plane {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let lo = size as f64 * 0.3;
    let hi = size as f64 * 0.7;
    let strokes: Vec<Stroke> = (0..3)
        .map(|_| {
            let pts = (0..3).map(|_| [rng.random_range(lo..hi), rng.random_range(lo..hi)]).collect();
            Stroke::polyline(pts)
        })
        .collect();
    render_strokes(size, size, &strokes, 1.5)
}

fn state(id: u32, loc: [i32; 2], score: f64) -> State {
    State {
        id,
        loc,
        origin: loc,
        score,
        children: Vec::new(),
        support: Arc::from(Vec::new()),
    }
}

proptest! {
    #![proptest_config(runner(12))]

    #[test]
    fn features_are_normalized_and_locally_maximal(seed in any::<u64>()) {
        let config = Config::default();
        let bank = build_gabor_bank(&config.features.gabor).unwrap();
        let image = stroke_image(64, seed);
        let volume = orientation_energy(&image, &bank).unwrap();
        let fs = extract_features(&image, &bank, config.features.min_energy).unwrap();
        let n = volume.orientations();
        for f in &fs.features {
            prop_assert!(f.energies.iter().all(|e| (0.0..=1.0).contains(e)));
            prop_assert!(f.normalized().iter().all(|e| (0.0..=1.0).contains(e)));
            prop_assert_eq!(f.dominant as usize, argmax(&f.energies));
            let d = f.dominant as usize;
            let (sx, sy) = normal_step(d, n);
            let (x, y) = (f.x as isize, f.y as isize);
            let e = volume.get(f.x as usize, f.y as usize, d);
            prop_assert!(e >= volume.get((x + sx) as usize, (y + sy) as usize, d));
            prop_assert!(e >= volume.get((x - sx) as usize, (y - sy) as usize, d));
        }
    }

    #[test]
    fn features_follow_translation(seed in any::<u64>(), dx in -6isize..=6, dy in -6isize..=6) {
        let config = Config::default();
        let bank = build_gabor_bank(&config.features.gabor).unwrap();
        let image = stroke_image(80, seed);
        let shifted = image.translate(dx, dy, image.get(0, 0));
        let a = orientation_energy(&image, &bank).unwrap();
        let b = orientation_energy(&shifted, &bank).unwrap();
        let fa = extract_features(&image, &bank, config.features.min_energy).unwrap();
        let fb = extract_features(&shifted, &bank, config.features.min_energy).unwrap();
        let margin = (bank.radius + 8) as isize;
        let inside = |x: isize, y: isize| x >= margin && y >= margin && x < 80 - margin && y < 80 - margin;
        for y in margin..80 - margin {
            for x in margin..80 - margin {
                if !inside(x + dx, y + dy) {
                    continue;
                }
                for o in 0..a.orientations() {
                    let (u, v) = (a.get(x as usize, y as usize, o), b.get((x + dx) as usize, (y + dy) as usize, o));
                    prop_assert!((u - v).abs() < 1e-4, "energy at ({x},{y},{o}): {u} vs {v}");
                }
            }
        }
        // feature sets agree on the interior except at numerical near-ties
        let keys = |fs: &shapehier::features::FeatureSet, sx: isize, sy: isize| -> BTreeSet<(isize, isize, u8)> {
            fs.features
                .iter()
                .map(|f| (f.x as isize - sx, f.y as isize - sy, f.dominant))
                .filter(|k| inside(k.0, k.1) && inside(k.0 + dx, k.1 + dy))
                .collect()
        };
        let ka = keys(&fa, 0, 0);
        let kb = keys(&fb, dx, dy);
        let n = a.orientations();
        for &(x, y, d) in ka.symmetric_difference(&kb) {
            let d = d as usize;
            let (sx, sy) = normal_step(d, n);
            let e = a.get(x as usize, y as usize, d);
            let near = [(x + sx, y + sy), (x - sx, y - sy)]
                .iter()
                .map(|&(u, v)| (e - a.get(u as usize, v as usize, d)).abs())
                .fold(f32::MAX, f32::min);
            let mut en: Vec<f32> = (0..n).map(|o| a.get(x as usize, y as usize, o)).collect();
            en.sort_by(|p, q| q.total_cmp(p));
            prop_assert!(near < 1e-4 || en[0] - en[1] < 1e-4, "feature ({x},{y},{d}) differs without a near-tie");
        }
    }

    #[test]
    fn deformation_peaks_only_at_the_mean(
        mean in prop::array::uniform2(-5.0f64..5.0),
        var in prop::array::uniform2(0.2f64..6.0),
        angle in 0.0f64..std::f64::consts::PI,
        offset in prop::array::uniform2(-4.0f64..4.0),
    ) {
        let (c, s) = (angle.cos(), angle.sin());
        let cov = [
            [c * c * var[0] + s * s * var[1], c * s * (var[0] - var[1])],
            [c * s * (var[0] - var[1]), s * s * var[0] + c * c * var[1]],
        ];
        let g = Gaussian2::new(mean, cov).unwrap();
        prop_assert_eq!(g.deformation(mean).unwrap(), 1.0);
        let x = [mean[0] + offset[0], mean[1] + offset[1]];
        let d = g.deformation(x).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        if offset[0].hypot(offset[1]) > 1e-3 {
            prop_assert!(d < 1.0);
        }
    }
}

proptest! {
    #![proptest_config(runner(64))]

    #[test]
    fn engine_matches_enumeration(seed in any::<u64>()) {
        let inst = dp_oracle::random_instance(seed);
        let (bc, bo) = dp_oracle::brute_force(&inst);
        let (ec, eo) = dp_oracle::engine_states(&inst);
        let a = dp_oracle::max_relative_error(&bc, &ec);
        let b = dp_oracle::max_relative_error(&bo, &eo);
        prop_assert!(a.is_some_and(|e| e <= 1e-9), "composition states differ: {a:?}");
        prop_assert!(b.is_some_and(|e| e <= 1e-9), "OR states differ: {b:?}");
        prop_assert!(ec.values().chain(eo.values()).all(|s| (0.0..=1.0).contains(s)));
    }

    #[test]
    fn supports_are_unions_of_children(seed in any::<u64>()) {
        let inst = dp_oracle::random_instance(seed);
        let engine = Engine::new(&inst.vocab).unwrap();
        let g = engine.infer(&inst.features, inst.vocab.depth()).unwrap();
        for l in 1..=g.depth() {
            for s in &g.layer(l).comps {
                if l == 1 {
                    prop_assert_eq!(s.support.len(), 1);
                    continue;
                }
                let mut union = BTreeSet::new();
                for &c in &s.children {
                    prop_assert_eq!(c.kind, NodeKind::Or);
                    union.extend(g.support(c).unwrap().iter().copied());
                }
                prop_assert_eq!(union.into_iter().collect::<Vec<_>>(), s.support.to_vec());
            }
            for s in &g.layer(l).ors {
                prop_assert_eq!(s.children.len(), 1);
                prop_assert_eq!(g.support(s.children[0]).unwrap(), &s.support[..]);
            }
        }
    }

    #[test]
    fn raising_tau_prunes_to_a_subset(seed in any::<u64>(), layer in 0usize..3, factor in 1.0f64..4.0) {
        let inst = dp_oracle::random_instance(seed);
        let (base, base_or) = dp_oracle::engine_states(&inst);
        let mut raised = dp_oracle::Instance { vocab: inst.vocab.clone(), features: inst.features.clone() };
        let l = layer.min(raised.vocab.depth() - 1);
        let t = &mut raised.vocab.layers[l].tau;
        *t = (*t * factor).min(0.99);
        let (comps, ors) = dp_oracle::engine_states(&raised);
        prop_assert!(comps.keys().all(|k| base.contains_key(k)));
        prop_assert!(ors.keys().all(|k| base_or.contains_key(k)));
    }

    #[test]
    fn storage_round_trip_is_identity(seed in any::<u64>()) {
        let inst = dp_oracle::random_instance(seed);
        let bytes = vocabulary::to_bytes(&inst.vocab).unwrap();
        let back = vocabulary::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &inst.vocab);
        prop_assert_eq!(vocabulary::to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn mutations_are_caught_or_harmless(seed in any::<u64>(), pick in any::<u32>(), value in 0u32..12) {
        let inst = dp_oracle::random_instance(seed);
        let mut v = inst.vocab.clone();
        let l = 1 + pick as usize % (v.depth() - 1);
        let layer = &mut v.layers[l];
        match pick % 4 {
            0 => {
                let k = pick as usize % layer.compositions.len();
                let parts = &mut layer.compositions[k].parts;
                let p = (pick as usize / 7) % parts.len();
                parts[p].appearance = vocabulary::Appearance::one_hot(value);
            }
            1 => {
                let k = pick as usize % layer.or_nodes.len();
                layer.or_nodes[k].members.push(value);
            }
            2 => {
                let k = pick as usize % layer.compositions.len();
                layer.compositions[k].parts.truncate(value as usize % 2);
            }
            _ => {
                let k = pick as usize % layer.compositions.len();
                layer.compositions[k].id = value;
            }
        }
        if validate(&v).is_empty() {
            let features = inst.features.clone();
            let run = catch_unwind(AssertUnwindSafe(|| {
                let engine = Engine::new(&v).unwrap();
                engine.infer(&features, v.depth()).unwrap();
            }));
            prop_assert!(run.is_ok(), "a vocabulary that passed validation broke inference");
        }
    }

    #[test]
    fn deg_share_stays_in_unit_interval(seed in any::<u64>(), masks in prop::collection::vec(1u8..16, 2..4)) {
        let inst = dp_oracle::random_instance(seed);
        let mut v = inst.vocab.clone();
        v.object_layer = v.depth();
        let top = v.layers.last().unwrap().compositions.len() as u32;
        for (i, m) in masks.iter().enumerate() {
            let comps: Vec<u32> = (0..top).filter(|c| m & (1 << (c % 4)) != 0).collect();
            v.classes.insert(format!("c{i}"), if comps.is_empty() { vec![0] } else { comps });
        }
        for l in 1..=v.depth() {
            let (mean, sd) = deg_share(&v, l).unwrap();
            prop_assert!((0.0..=1.0).contains(&mean), "layer {l}: {mean}");
            prop_assert!(sd >= 0.0);
        }
    }

    #[test]
    fn downsampling_keeps_cell_maxima(
        raw in prop::collection::vec((0u32..3, 0i32..20, 0i32..20, 0.0f64..1.0), 1..60),
        half in any::<bool>(),
    ) {
        let rho = if half { 0.5 } else { 1.0 };
        let states: Vec<State> = raw.iter().map(|&(id, x, y, s)| state(id, [x, y], s)).collect();
        let out = downsample(states, rho, 20, 20);
        let mut expect: BTreeMap<(u32, i32, i32), f64> = BTreeMap::new();
        for &(id, x, y, s) in &raw {
            let key = (id, (x as f64 * rho).floor() as i32, (y as f64 * rho).floor() as i32);
            let e = expect.entry(key).or_insert(f64::MIN);
            *e = e.max(s);
        }
        let got: BTreeMap<(u32, i32, i32), f64> = out.iter().map(|s| ((s.id, s.loc[0], s.loc[1]), s.score)).collect();
        prop_assert_eq!(got.len(), out.len());
        prop_assert_eq!(got, expect);
    }
}

fn pool_strategy() -> impl Strategy<Value = CandidatePool> {
    (4usize..20).prop_flat_map(|neighborhoods| {
        prop::collection::vec(
            (prop::collection::btree_map(0..neighborhoods as u32, 0.05f32..1.0, 1..neighborhoods), 2usize..6),
            1..12,
        )
        .prop_map(move |list| {
            let candidates = list
                .into_iter()
                .enumerate()
                .map(|(i, (entries, parts))| {
                    let entries: Vec<(u32, f32)> = entries.into_iter().collect();
                    Candidate {
                        key: CandidateKey::New {
                            reference: i as u32,
                            duplets: vec![i as u32],
                        },
                        parts,
                        coverage: entries.iter().map(|e| e.1 as f64).sum(),
                        count: entries.len() as u32,
                        entries,
                    }
                })
                .collect();
            CandidatePool::from_candidates(candidates, neighborhoods)
        })
    })
}

fn detections_strategy() -> impl Strategy<Value = (Vec<Vec<Detection>>, Vec<ImageTruth>)> {
    let bbox = (0.0f64..60.0, 0.0f64..60.0, 8.0f64..30.0, 8.0f64..30.0)
        .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h));
    prop::collection::vec(
        (
            prop::collection::vec(bbox.clone(), 0..3),
            prop::collection::vec((bbox, 0u8..20), 0..4),
        ),
        1..4,
    )
    .prop_map(|images| {
        let mut dets = Vec::new();
        let mut truth = Vec::new();
        for (i, (gt, ds)) in images.into_iter().enumerate() {
            truth.push(ImageTruth {
                id: format!("img{i}"),
                boxes: gt.into_iter().map(|b| ("a".to_string(), b)).collect(),
            });
            dets.push(
                ds.into_iter()
                    .map(|(b, s)| Detection {
                        class: "a".to_string(),
                        bbox: b,
                        score: s as f64 / 20.0,
                        comp: 0,
                        level: 0,
                    })
                    .collect(),
            );
        }
        (dets, truth)
    })
}

proptest! {
    #![proptest_config(runner(128))]

    #[test]
    fn mcmc_never_loses_to_greedy(pool in pool_strategy(), seed in any::<u64>()) {
        use rand::SeedableRng;
        let penalty = 0.05;
        let greedy = greedy_select(&pool, &GreedyParams { penalty, slack: 0.1, stop_fraction: 0.05, max_count: 400 }, &[]);
        let refined = mcmc_refine(
            &pool,
            &greedy,
            &[],
            &McmcParams { penalty, beta: 1.05, iterations: 100, move_mix: [0.5, 0.25, 0.25], add_floor: 0.005 },
            &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed),
        );
        prop_assert!(objective(&pool, &refined, penalty) >= objective(&pool, &greedy, penalty));
    }

    #[test]
    fn greedy_gains_never_increase(pool in pool_strategy()) {
        let penalty = 0.05;
        let picked = greedy_select(&pool, &GreedyParams { penalty, slack: 0.0, stop_fraction: 0.0, max_count: 400 }, &[]);
        let mut last = f64::MAX;
        for k in 1..=picked.len() {
            let gain = objective(&pool, &picked[..k], penalty) - objective(&pool, &picked[..k - 1], penalty);
            prop_assert!(gain <= last + 1e-5, "gain {gain} after {last}");
            last = gain;
        }
    }

    #[test]
    fn chi2_is_a_semimetric(
        a in prop::collection::vec(prop::array::uniform2(-20.0f64..20.0), 3..30),
        b in prop::collection::vec(prop::array::uniform2(-20.0f64..20.0), 3..30),
    ) {
        let (Ok(sa), Ok(sb)) = (shape_context(&a, 5, 12), shape_context(&b, 5, 12)) else {
            return Ok(());
        };
        let ab = chi2(&sa, &sb).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - chi2(&sb, &sa).unwrap()).abs() < 1e-12);
        prop_assert!(chi2(&sa, &sa).unwrap().abs() < 1e-12);
    }

    #[test]
    fn shape_context_ignores_translation_and_scale(
        pts in prop::collection::vec(prop::array::uniform2(-20.0f64..20.0), 3..30),
        shift in prop::array::uniform2(-50.0f64..50.0),
        scale in 0.25f64..4.0,
    ) {
        let Ok(a) = shape_context(&pts, 5, 12) else { return Ok(()) };
        let moved: Vec<[f64; 2]> = pts.iter().map(|p| [p[0] * scale + shift[0], p[1] * scale + shift[1]]).collect();
        let b = shape_context(&moved, 5, 12).unwrap();
        prop_assert!(chi2(&a, &b).unwrap() < 1e-9);
    }

    #[test]
    fn curves_match_a_direct_matcher((dets, truth) in detections_strategy()) {
        let (curve, positives, n) = class_curve("a", &dets, &truth, 0.5);
        prop_assert_eq!(positives, truth.iter().map(|t| t.boxes.len()).sum::<usize>());
        prop_assert_eq!(n, dets.iter().map(|d| d.len()).sum::<usize>());
        // detections in descending score, ties by image then position
        let mut order: Vec<(usize, usize)> = dets.iter().enumerate().flat_map(|(i, d)| (0..d.len()).map(move |k| (i, k))).collect();
        order.sort_by(|x, y| dets[y.0][y.1].score.total_cmp(&dets[x.0][x.1].score).then(x.cmp(y)));
        let mut matched: BTreeSet<(usize, usize)> = BTreeSet::new();
        let (mut tp, mut fp) = (0usize, 0usize);
        let mut points = Vec::new();
        for (idx, &(i, k)) in order.iter().enumerate() {
            let free = (0..truth[i].boxes.len())
                .filter(|&j| !matched.contains(&(i, j)))
                .map(|j| (iou(&dets[i][k].bbox, &truth[i].boxes[j].1), j))
                .filter(|&(v, _)| v >= 0.5)
                .max_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
            match free {
                Some((_, j)) => {
                    matched.insert((i, j));
                    tp += 1;
                }
                None => fp += 1,
            }
            let s = dets[i][k].score;
            if order.get(idx + 1).is_none_or(|&(a, b)| dets[a][b].score < s) {
                points.push((s, tp, fp));
            }
        }
        prop_assert_eq!(curve.len(), points.len());
        for (c, &(s, tp, fp)) in curve.iter().zip(&points) {
            prop_assert_eq!(c.threshold, s);
            let recall = if positives == 0 { 0.0 } else { tp as f64 / positives as f64 };
            prop_assert!((c.recall - recall).abs() < 1e-12);
            prop_assert!((c.fppi - fp as f64 / truth.len() as f64).abs() < 1e-12);
        }
        for w in curve.windows(2) {
            prop_assert!(w[1].threshold < w[0].threshold);
            prop_assert!(w[1].recall >= w[0].recall);
            prop_assert!(w[1].fppi >= w[0].fppi);
        }
        prop_assert!(tp <= positives);
    }
}
