//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

mod dp_oracle;
mod pipeline;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use shapehier::structure_learning::{
    extract_duplets, greedy_select, mcmc_refine, objective, parts_penalty, Candidate, CandidateKey,
    CandidatePool, GreedyParams, Histograms, McmcParams, PairHistogram,
};
use shapehier::{Config, Gaussian2};

pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(pass: bool, detail: impl Into<String>) -> Outcome {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn dp_oracle() -> Outcome {
    let t = Instant::now();
    let mut worst = 0.0f64;
    let mut states = 0usize;
    let mut per_layer = std::collections::BTreeMap::new();
    let mut mismatched = Vec::new();
    let mut out_of_range = 0usize;
    let instances = 300u64;
    for seed in 0..instances {
        let inst = dp_oracle::random_instance(seed);
        let (bc, bo) = dp_oracle::brute_force(&inst);
        let (ec, eo) = dp_oracle::engine_states(&inst);
        states += ec.len() + eo.len();
        for k in ec.keys() {
            *per_layer.entry(k.0).or_insert(0usize) += 1;
        }
        out_of_range += ec.values().chain(eo.values()).filter(|s| !(0.0..=1.0).contains(*s)).count();
        match (dp_oracle::max_relative_error(&bc, &ec), dp_oracle::max_relative_error(&bo, &eo)) {
            (Some(a), Some(b)) => worst = worst.max(a).max(b),
            _ => mismatched.push(seed),
        }
    }
    let elapsed = t.elapsed();
    let pass = mismatched.is_empty() && worst <= 1e-9 && out_of_range == 0 && elapsed < Duration::from_secs(60);
    Outcome::new(
        pass,
        format!(
            "{instances} instances, {states} states (compositions per layer {per_layer:?}), max relative error {worst:.2e}, state-set mismatches {mismatched:?}, {}",
            secs(elapsed)
        ),
    )
}

fn deformation_analytics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst_mu = 0.0f64;
    let mut worst_sigma = 0.0f64;
    for _ in 0..200 {
        let (s1, s2) = (rng.random_range(0.1..9.0), rng.random_range(0.1..9.0));
        let t: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let (c, s) = (t.cos(), t.sin());
        let cov = [
            [c * c * s1 + s * s * s2, c * s * (s1 - s2)],
            [c * s * (s1 - s2), s * s * s1 + c * c * s2],
        ];
        let mean = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
        let g = Gaussian2::new(mean, cov).unwrap();
        worst_mu = worst_mu.max((g.deformation(mean).unwrap() - 1.0).abs());
        // one standard deviation along each principal axis
        for (sd, dir) in [(s1.sqrt(), [c, s]), (s2.sqrt(), [-s, c])] {
            for sign in [1.0, -1.0] {
                let x = [mean[0] + sign * sd * dir[0], mean[1] + sign * sd * dir[1]];
                worst_sigma = worst_sigma.max((g.deformation(x).unwrap() - (-0.5f64).exp()).abs());
            }
        }
    }
    let ranges = pipeline::score_range_summary();
    let pass = worst_mu <= 1e-12 && worst_sigma <= 1e-12 && ranges.0;
    Outcome::new(
        pass,
        format!("|D(mu)-1| max {worst_mu:.1e}, |D(1 sd)-exp(-0.5)| max {worst_sigma:.1e}; {}", ranges.1),
    )
}

fn mode_recovery() -> Outcome {
    let config = Config::default();
    let radius = 10u32;
    let trials = 100;
    let mut good = 0;
    let mut worst = 0.0f64;
    let mut counts = std::collections::BTreeMap::new();
    for seed in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let modes: [[f64; 2]; 2] = loop {
            let mut pick = || {
                let r = rng.random_range(0.0..radius as f64 - 3.0);
                let a = rng.random_range(0.0..std::f64::consts::TAU);
                [r * a.cos(), r * a.sin()]
            };
            let (a, b) = (pick(), pick());
            if (a[0] - b[0]).hypot(a[1] - b[1]) >= 6.0 {
                break [a, b];
            }
        };
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut h = PairHistogram::new(0, 1, radius);
        for m in &modes {
            for _ in 0..500 {
                let d = [
                    (m[0] + noise.sample(&mut rng)).round() as i32,
                    (m[1] + noise.sample(&mut rng)).round() as i32,
                ];
                h.add(d, 1);
            }
        }
        let mut hists = Histograms::new();
        hists.insert((0, 1), h);
        let duplets = extract_duplets(&hists, 2, &config.learning);
        *counts.entry(duplets.len()).or_insert(0) += 1;
        if duplets.len() != 2 {
            continue;
        }
        let err = |m: [f64; 2]| {
            duplets
                .iter()
                .map(|d| (d.geometry.mean[0] - m[0]).hypot(d.geometry.mean[1] - m[1]))
                .fold(f64::MAX, f64::min)
        };
        let e = err(modes[0]).max(err(modes[1]));
        worst = worst.max(e);
        if e <= 0.5 {
            good += 1;
        }
    }
    let pass = good * 100 >= 95 * trials;
    Outcome::new(
        pass,
        format!("{good}/{trials} trials with exactly 2 duplets and mean error <= 0.5 cells (duplet counts {counts:?}, worst error {worst:.3})"),
    )
}

fn random_pool(rng: &mut ChaCha8Rng) -> CandidatePool {
    let neighborhoods = rng.random_range(8..=30);
    let n = rng.random_range(2..=12);
    let candidates = (0..n)
        .map(|i| {
            let mut entries = Vec::new();
            for k in 0..neighborhoods {
                if rng.random_bool(0.4) {
                    entries.push((k as u32, rng.random_range(0.05f32..1.0)));
                }
            }
            if entries.is_empty() {
                entries.push((rng.random_range(0..neighborhoods as u32), 0.5));
            }
            Candidate {
                key: CandidateKey::New {
                    reference: i,
                    duplets: vec![i],
                },
                parts: rng.random_range(2..=6),
                coverage: entries.iter().map(|e| e.1 as f64).sum(),
                count: entries.len() as u32,
                entries,
            }
        })
        .collect();
    CandidatePool::from_candidates(candidates, neighborhoods)
}

/// Best objective over all subsets, computed without the library.
fn exhaustive(pool: &CandidatePool, penalty: f64) -> f64 {
    let n = pool.candidates.len();
    let mut best = f64::MIN;
    for mask in 0u32..(1 << n) {
        let mut cover = vec![0f32; pool.neighborhoods.len()];
        let mut parts = 0;
        for c in 0..n {
            if mask & (1 << c) != 0 {
                parts += pool.candidates[c].parts;
                for &(k, v) in &pool.candidates[c].entries {
                    cover[k as usize] = cover[k as usize].max(v);
                }
            }
        }
        let v = cover.iter().map(|&x| x as f64).sum::<f64>() - penalty * parts as f64;
        best = best.max(v);
    }
    best
}

fn selection_sanity() -> Outcome {
    let config = Config::default();
    let lc = &config.learning;
    let runs = 200;
    let mut within = 0;
    let mut monotone = 0;
    let mut worst_gap = 0.0f64;
    for seed in 0..runs {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + seed);
        let pool = random_pool(&mut rng);
        let penalty = parts_penalty(&pool, lc.parts_penalty);
        let greedy = greedy_select(
            &pool,
            &GreedyParams {
                penalty,
                slack: lc.slack,
                stop_fraction: lc.stop_fraction,
                max_count: lc.max_compositions,
            },
            &[],
        );
        let g = objective(&pool, &greedy, penalty);
        let refined = mcmc_refine(
            &pool,
            &greedy,
            &[],
            &McmcParams {
                penalty,
                beta: lc.beta,
                iterations: lc.mcmc_iterations,
                move_mix: lc.move_mix,
                add_floor: lc.polish_add_floor,
            },
            &mut ChaCha8Rng::seed_from_u64(seed),
        );
        let m = objective(&pool, &refined, penalty);
        let opt = exhaustive(&pool, penalty);
        let gap = (opt - m) / opt.abs().max(1e-12);
        worst_gap = worst_gap.max(gap);
        within += usize::from(gap <= 0.02);
        monotone += usize::from(m >= g);
    }
    let pass = within == runs as usize && monotone == runs as usize;
    Outcome::new(
        pass,
        format!(
            "{within}/{runs} within 2% of the exhaustive optimum (worst gap {:.2}%), MCMC >= greedy in {monotone}/{runs}",
            100.0 * worst_gap
        ),
    )
}

fn main() {
    let criteria: Vec<(&str, fn() -> Outcome)> = vec![
        ("1 DP oracle equivalence", dp_oracle),
        ("2 deformation analytics and score range", deformation_analytics),
        ("3 mode recovery", mode_recovery),
        ("4 selection sanity", selection_sanity),
        ("5 gestalt structure of layer 3", pipeline::gestalt),
        ("6 end-to-end synthetic detection", pipeline::detection),
        ("7 sub-linear sharing", pipeline::sharing),
        ("8 threshold learning", pipeline::thresholds),
        ("9 determinism", pipeline::determinism),
        ("10 single-class detection time", pipeline::timing),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::new(false, format!("panicked: {msg}"))
        });
        failed += usize::from(!outcome.pass);
        println!(
            "criterion {name}: {} ({}; {})",
            if outcome.pass { "PASS" } else { "FAIL" },
            outcome.detail,
            secs(t.elapsed())
        );
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
