//! Criteria that run the learning and detection pipeline on the synthetic
//! corpus. The learned vocabularies are shared through one lazily built run.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use shapehier::eval::{evaluate, Detector, EvalReport, ImageTruth};
use shapehier::features::build_gabor_bank;
use shapehier::multiclass::{
    deg_share, features_of, learn_class, learn_generic, learn_thresholds, parse_all, training_positives, ClassData,
};
use shapehier::or_learning::{chi2, prototypes, shape_context};
use shapehier::synth::{generate, SynthConfig, SynthCorpus};
use shapehier::{vocabulary, Config, Engine, Vocabulary};

use crate::Outcome;

pub struct Run {
    pub config: Config,
    pub corpus: SynthCorpus,
    pub classes: Vec<ClassData>,
    pub generic: Vocabulary,
    pub generic_time: Duration,
    /// All classes, no thresholds.
    pub joint: Vocabulary,
    /// `joint` with thresholds at the configured safety fraction.
    pub final_vocab: Vocabulary,
    pub report: EvalReport,
    pub states: usize,
    pub total_time: Duration,
}

pub struct Detected {
    pub report: EvalReport,
    pub states: usize,
}

fn class_data(corpus: &SynthCorpus) -> Vec<ClassData> {
    corpus
        .classes
        .iter()
        .map(|c| ClassData {
            name: c.name.clone(),
            train: c.train.clone(),
            validation: c.validation.clone(),
        })
        .collect()
}

pub fn detect_test(vocab: &Vocabulary, corpus: &SynthCorpus, config: &Config) -> Detected {
    let detector = Detector::new(vocab, config).unwrap();
    let mut detections = Vec::new();
    let mut truth = Vec::new();
    let mut states = 0;
    for img in corpus.test_images() {
        let r = detector.detect(&img.image).unwrap();
        states += r.states;
        detections.push(r.detections);
        truth.push(ImageTruth {
            id: img.id.clone(),
            boxes: img.boxes.iter().map(|b| (img.class.clone().unwrap(), *b)).collect(),
        });
    }
    let names: Vec<String> = corpus.classes.iter().map(|c| c.name.clone()).collect();
    let report = evaluate(&detections, &truth, &names, config).unwrap();
    Detected { report, states }
}

pub fn full_run() -> Run {
    let start = Instant::now();
    let config = Config::synthetic();
    let corpus = generate(&SynthConfig::default(), config.seed);
    let natural: Vec<_> = corpus.natural.iter().map(|i| &i.image).collect();
    let t = Instant::now();
    let (generic, _) = learn_generic(&natural, 3, &config).unwrap();
    let generic_time = t.elapsed();
    let classes = class_data(&corpus);
    let mut joint = generic.clone();
    for c in &classes {
        learn_class(&mut joint, c, &config).unwrap();
    }
    let mut final_vocab = joint.clone();
    learn_thresholds(&mut final_vocab, &classes, config.multiclass.safety_fraction, &config).unwrap();
    let detected = detect_test(&final_vocab, &corpus, &config);
    Run {
        config,
        corpus,
        classes,
        generic,
        generic_time,
        joint,
        final_vocab,
        report: detected.report,
        states: detected.states,
        total_time: start.elapsed(),
    }
}

pub fn shared() -> &'static Run {
    static RUN: OnceLock<Run> = OnceLock::new();
    RUN.get_or_init(full_run)
}

/// Every composition and OR state of every test image parse lies in [0, 1].
pub fn score_range_summary() -> (bool, String) {
    let run = shared();
    let detector = Detector::new(&run.final_vocab, &run.config).unwrap();
    let (mut total, mut bad) = (0usize, 0usize);
    for img in run.corpus.test_images() {
        for (g, _) in detector.parse(&img.image, run.final_vocab.object_layer).unwrap() {
            for l in 1..=g.depth() {
                for s in g.layer(l).comps.iter().chain(&g.layer(l).ors) {
                    total += 1;
                    bad += usize::from(!(0.0..=1.0).contains(&s.score));
                }
            }
        }
    }
    (bad == 0, format!("{bad} of {total} pipeline state scores outside [0, 1]"))
}

fn rotate(points: &[[f64; 2]], a: f64) -> Vec<[f64; 2]> {
    let (c, s) = (a.cos(), a.sin());
    points.iter().map(|p| [p[0] * c - p[1] * s, p[0] * s + p[1] * c]).collect()
}

pub fn gestalt() -> Outcome {
    let run = shared();
    let config = &run.config;
    let oc = &config.or_learning;
    let bank = build_gabor_bank(&config.features.gabor).unwrap();
    let natural: Vec<_> = run.corpus.natural.iter().map(|i| &i.image).collect();
    let sets = features_of(&natural, &bank, config).unwrap();
    let engine = Engine::new(&run.generic).unwrap();
    let graphs = parse_all(&engine, &sets, 3).unwrap();
    let refs: Vec<_> = graphs.iter().collect();
    let line: Vec<[f64; 2]> = (0..24).map(|i| [i as f64, 0.0]).collect();
    let corner: Vec<[f64; 2]> = (0..12)
        .map(|i| [i as f64, 0.0])
        .chain((1..12).map(|i| [0.0, i as f64]))
        .collect();
    let templates: Vec<_> = (0..24)
        .map(|k| {
            let a = k as f64 * std::f64::consts::PI / 12.0;
            (
                shape_context(&rotate(&line, a), oc.radial_bins, oc.angular_bins).unwrap(),
                shape_context(&rotate(&corner, a), oc.radial_bins, oc.angular_bins).unwrap(),
            )
        })
        .collect();
    let (mut best_line, mut best_corner) = (f64::MAX, f64::MAX);
    let (mut lines, mut corners) = (0, 0);
    for proto in prototypes(&run.generic, &refs, 3, oc.samples).iter().flatten() {
        let Ok(d) = shape_context(proto, oc.radial_bins, oc.angular_bins) else {
            continue;
        };
        let l = templates.iter().map(|t| chi2(&d, &t.0).unwrap()).fold(f64::MAX, f64::min);
        let c = templates.iter().map(|t| chi2(&d, &t.1).unwrap()).fold(f64::MAX, f64::min);
        best_line = best_line.min(l);
        best_corner = best_corner.min(c);
        lines += usize::from(l < 0.25);
        corners += usize::from(c < 0.25);
    }
    let pass = lines >= 1 && corners >= 1 && run.generic_time < Duration::from_secs(600);
    Outcome::new(
        pass,
        format!(
            "{} layer-3 compositions; {lines} line-like (best chi2 {best_line:.3}), {corners} corner-like (best chi2 {best_corner:.3}); layers 2-3 learned in {:.1}s",
            run.generic.layer(3).compositions.len(),
            run.generic_time.as_secs_f64()
        ),
    )
}

pub fn detection() -> Outcome {
    let run = shared();
    let per: Vec<String> = run
        .report
        .classes
        .iter()
        .map(|(c, r)| format!("{c} {:.2}", r.recall_at_eer))
        .collect();
    let pass = run.report.classes.len() == 3
        && run.report.classes.values().all(|r| r.recall_at_eer >= 0.85)
        && run.total_time < Duration::from_secs(900);
    Outcome::new(
        pass,
        format!(
            "recall@EER at IoU {}: {}; {} test states; full pipeline {:.1}s",
            run.report.iou_threshold,
            per.join(", "),
            run.states,
            run.total_time.as_secs_f64()
        ),
    )
}

fn size_2_to_4(v: &Vocabulary) -> usize {
    (2..=4.min(v.depth())).map(|l| v.layer(l).compositions.len()).sum()
}

fn independent(run: &Run, class: &ClassData) -> Vocabulary {
    let mut v = run.generic.clone();
    learn_class(&mut v, class, &run.config).unwrap();
    v
}

pub fn sharing() -> Outcome {
    let run = shared();
    let joint = size_2_to_4(&run.joint);
    let separate: Vec<usize> = run.classes.iter().map(|c| size_2_to_4(&independent(run, c))).collect();
    let sum: usize = separate.iter().sum();
    let (share, _) = deg_share(&run.joint, 2).unwrap();
    let pass = (joint as f64) < 0.8 * sum as f64 && share > 0.3;
    Outcome::new(
        pass,
        format!(
            "layers 2-4: joint {joint} vs independent {separate:?} (sum {sum}, ratio {:.3}); deg_share(2) {share:.3}",
            joint as f64 / sum as f64
        ),
    )
}

fn mean_recall(r: &EvalReport) -> f64 {
    r.classes.values().map(|c| c.recall_at_eer).sum::<f64>() / r.classes.len() as f64
}

pub fn thresholds() -> Outcome {
    let run = shared();
    let config = &run.config;
    let before = training_positives(&run.joint, &run.classes, config).unwrap();
    let mut exact = run.joint.clone();
    learn_thresholds(&mut exact, &run.classes, 1.0, config).unwrap();
    let after = training_positives(&exact, &run.classes, config).unwrap();
    let identical = before == after;

    let mut relaxed = run.joint.clone();
    learn_thresholds(&mut relaxed, &run.classes, 0.9, config).unwrap();
    let base = detect_test(&run.joint, &run.corpus, config);
    let cut = detect_test(&relaxed, &run.corpus, config);
    let reduction = 1.0 - cut.states as f64 / base.states as f64;
    let drop = 100.0 * (mean_recall(&base.report) - mean_recall(&cut.report));
    let pass = identical && reduction >= 0.2 && drop < 2.0;
    Outcome::new(
        pass,
        format!(
            "safety 1.0: {} training positives, identical {identical}; safety 0.9: test states {} -> {} ({:.1}% fewer), mean recall@EER {:.3} -> {:.3} ({drop:.2} point drop)",
            before.len(),
            base.states,
            cut.states,
            100.0 * reduction,
            mean_recall(&base.report),
            mean_recall(&cut.report)
        ),
    )
}

pub fn determinism() -> Outcome {
    let first = shared();
    let second = full_run();
    let generic = vocabulary::to_bytes(&first.generic).unwrap() == vocabulary::to_bytes(&second.generic).unwrap();
    let vocab =
        vocabulary::to_bytes(&first.final_vocab).unwrap() == vocabulary::to_bytes(&second.final_vocab).unwrap();
    let report = first.report.to_json() == second.report.to_json();
    Outcome::new(
        generic && vocab && report,
        format!("generic vocabulary identical {generic}, final vocabulary identical {vocab}, EvalReport identical {report}"),
    )
}

pub fn timing() -> Outcome {
    let run = shared();
    let class = &run.corpus.classes[0];
    let vocab = independent(run, &run.classes[0]);
    let mut worst = Duration::ZERO;
    let mut total = Duration::ZERO;
    for img in &class.test {
        let t = Instant::now();
        let detector = Detector::new(&vocab, &run.config).unwrap();
        detector.detect(&img.image).unwrap();
        let e = t.elapsed();
        worst = worst.max(e);
        total += e;
    }
    let (w, h) = (class.test[0].image.width(), class.test[0].image.height());
    Outcome::new(
        worst < Duration::from_secs(1),
        format!(
            "{} {w}x{h} images, class {}: worst {:.0} ms, mean {:.0} ms",
            class.test.len(),
            class.name,
            worst.as_secs_f64() * 1e3,
            total.as_secs_f64() * 1e3 / class.test.len() as f64
        ),
    )
}
