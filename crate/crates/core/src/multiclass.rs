//! Incremental multi-class training, pruning thresholds and the sharing
//! measure.
//!
//! Layers 2 and 3 are learned once from unlabeled images. Every class then
//! extends layers 4 and up from its rescaled training boxes; compositions
//! already in the vocabulary compete in every candidate pool, so a new class
//! only adds what the existing vocabulary does not explain.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::dataset::LabeledImage;
use crate::error::{Error, Result};
use crate::features::{build_gabor_bank, extract_features, rescale, FeatureSet, GaborBank};
use crate::geometry::BBox;
use crate::inference::{Engine, InferenceGraph, NodeRef};
use crate::or_learning::learn_or_nodes;
use crate::param_learning::{estimate_layer1, object_appearance, refine_geometry};
use crate::raster::Plane;
use crate::structure_learning::{
    candidate_parts, candidate_pool, learn_layer, select_candidates, select_object_layer,
    CandidateKey, LayerReport, ScoredBox,
};
use crate::vocabulary::{Composition, Layer, OrComposition, Vocabulary};

/// Training and validation images of one class.
#[derive(Debug, Clone)]
pub struct ClassData {
    pub name: String,
    pub train: Vec<LabeledImage>,
    pub validation: Vec<LabeledImage>,
}

/// A training box cut out and rescaled to the object diagonal.
#[derive(Debug, Clone)]
pub struct Crop {
    pub image: Plane,
    /// The box in crop coordinates.
    pub bbox: BBox,
}

/// Extra pixels beyond the filter radius kept around every crop.
const CROP_GUARD: usize = 4;

/// Cut every box out of `images` with a margin and rescale it so the box
/// diagonal is `object_diagonal`. The margin is `box_margin` times the box
/// size but never less than the filter radius plus a few pixels, so edges
/// on the box boundary still get full filter support.
pub fn crops(images: &[LabeledImage], config: &Config, bank: &GaborBank) -> Vec<Crop> {
    let target = config.multiclass.object_diagonal;
    let mut out = Vec::new();
    for img in images {
        for b in &img.boxes {
            let d = b.diagonal();
            if d <= 0.0 {
                continue;
            }
            let f = target / d;
            let min_margin = (bank.radius + CROP_GUARD) as f64 / f;
            let m = (config.multiclass.box_margin * b.width().max(b.height())).max(min_margin);
            let x0 = (b.x0 - m).floor().max(0.0) as usize;
            let y0 = (b.y0 - m).floor().max(0.0) as usize;
            let x1 = ((b.x1 + m).ceil() as usize).min(img.image.width());
            let y1 = ((b.y1 + m).ceil() as usize).min(img.image.height());
            if x1 <= x0 || y1 <= y0 {
                continue;
            }
            let cut = img.image.crop(x0, y0, x1 - x0, y1 - y0);
            let scaled = rescale(&cut, f);
            let fx = scaled.width() as f64 / cut.width() as f64;
            let fy = scaled.height() as f64 / cut.height() as f64;
            out.push(Crop {
                image: scaled,
                bbox: BBox::new(
                    (b.x0 - x0 as f64) * fx,
                    (b.y0 - y0 as f64) * fy,
                    (b.x1 - x0 as f64) * fx,
                    (b.y1 - y0 as f64) * fy,
                ),
            });
        }
    }
    out
}

/// Whole validation images rescaled so their first box has the object
/// diagonal, with their boxes scaled alike.
pub fn rescaled_validation(images: &[LabeledImage], config: &Config) -> Vec<Crop> {
    images
        .iter()
        .filter_map(|img| {
            let b = img.boxes.first()?;
            let f = config.multiclass.object_diagonal / b.diagonal().max(1e-9);
            let scaled = rescale(&img.image, f);
            let fx = scaled.width() as f64 / img.image.width() as f64;
            let fy = scaled.height() as f64 / img.image.height() as f64;
            Some(Crop {
                image: scaled,
                bbox: BBox::new(b.x0 * fx, b.y0 * fy, b.x1 * fx, b.y1 * fy),
            })
        })
        .collect()
}

/// Single-scale features of every image.
pub fn features_of(images: &[&Plane], bank: &GaborBank, config: &Config) -> Result<Vec<FeatureSet>> {
    images
        .par_iter()
        .map(|im| extract_features(im, bank, config.features.min_energy))
        .collect()
}

/// Parse every feature set up to `up_to`.
pub fn parse_all(engine: &Engine, sets: &[FeatureSet], up_to: usize) -> Result<Vec<InferenceGraph>> {
    sets.par_iter().map(|f| engine.infer(f, up_to)).collect()
}

/// Learn layer `l` from feature sets, refine its new compositions and group
/// them into OR nodes.
fn grow_layer(
    vocab: &mut Vocabulary,
    sets: &[FeatureSet],
    l: usize,
    config: &Config,
    stage: &str,
) -> Result<LayerReport> {
    let engine = Engine::new(vocab)?;
    let graphs = parse_all(&engine, sets, l - 1)?;
    let refs: Vec<&InferenceGraph> = graphs.iter().collect();
    let first_new = if vocab.depth() >= l {
        vocab.layer(l).compositions.len() as u32
    } else {
        0
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.stage_seed(&format!("{stage}/layer{l}")));
    let report = learn_layer(vocab, &refs, l, config, &mut rng)?;
    if report.added.is_empty() {
        return Ok(report);
    }
    refine_geometry(vocab, &refs, l, first_new, config)?;
    let engine = Engine::new(vocab)?;
    let graphs = parse_all(&engine, sets, l)?;
    let refs: Vec<&InferenceGraph> = graphs.iter().collect();
    let oc = &config.or_learning;
    learn_or_nodes(vocab, &refs, l, first_new, oc.radial_bins, oc.angular_bins, oc.cutoff, oc.samples)?;
    Ok(report)
}

/// Layer 1 and the generic layers 2..=`top` from unlabeled images.
pub fn learn_generic(natural: &[&Plane], top: usize, config: &Config) -> Result<(Vocabulary, Vec<LayerReport>)> {
    if natural.is_empty() {
        return Err(Error::EmptyDataset("no natural images".into()));
    }
    let bank = build_gabor_bank(&config.features.gabor)?;
    let sets = features_of(natural, &bank, config)?;
    let mut vocab = Vocabulary::new(config);
    let refs: Vec<&FeatureSet> = sets.iter().collect();
    estimate_layer1(&mut vocab, &refs, config);
    let mut reports = Vec::new();
    for l in 2..=top.min(config.layers.object_layer - 1) {
        reports.push(grow_layer(&mut vocab, &sets, l, config, "generic")?);
    }
    Ok((vocab, reports))
}

/// What adding one class changed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClassReport {
    pub class: String,
    pub layers: Vec<LayerReport>,
    /// Object-layer compositions assigned to the class.
    pub objects: Vec<u32>,
    /// Object-layer compositions added to the vocabulary.
    pub added_objects: Vec<u32>,
    pub validation_f: f64,
}

/// Boxes of every object-layer composition on every graph, suppressed per
/// composition.
fn object_boxes(graphs: &[InferenceGraph], o: usize, comps: usize, nms_iou: f64, pad: f64) -> Result<Vec<Vec<Vec<ScoredBox>>>> {
    let mut out = vec![vec![Vec::new(); graphs.len()]; comps];
    for (gi, g) in graphs.iter().enumerate() {
        if g.depth() < o {
            continue;
        }
        for (i, s) in g.layer(o).comps.iter().enumerate() {
            if let Some(b) = g.support_box(NodeRef::comp(o, i as u32))? {
                out[s.id as usize][gi].push(ScoredBox {
                    bbox: b.padded(pad),
                    score: s.score,
                });
            }
        }
    }
    for per in &mut out {
        for boxes in per.iter_mut() {
            *boxes = crate::structure_learning::nms(std::mem::take(boxes), nms_iou);
        }
    }
    Ok(out)
}

/// Add one class: layers above the generic ones are extended from its
/// training crops; object-layer compositions are chosen by detection
/// F-measure on its rescaled validation images.
pub fn learn_class(vocab: &mut Vocabulary, class: &ClassData, config: &Config) -> Result<ClassReport> {
    if class.train.iter().all(|i| i.boxes.is_empty()) {
        return Err(Error::EmptyDataset(format!("class {} has no training boxes", class.name)));
    }
    if class.validation.iter().all(|i| i.boxes.is_empty()) {
        return Err(Error::EmptyDataset(format!("class {} has no validation boxes", class.name)));
    }
    let o = config.layers.object_layer;
    if vocab.depth() < 2 || vocab.depth() + 1 < o.min(4) {
        return Err(Error::InvalidConfig("generic layers must be learned first".into()));
    }
    let bank = build_gabor_bank(&config.features.gabor)?;
    let train = crops(&class.train, config, &bank);
    let train_images: Vec<&Plane> = train.iter().map(|c| &c.image).collect();
    let sets = features_of(&train_images, &bank, config)?;
    let stage = format!("class/{}", class.name);
    let mut report = ClassReport {
        class: class.name.clone(),
        ..Default::default()
    };
    let first_class_layer = 4.min(o);
    for l in first_class_layer..o {
        if l > vocab.depth() + 1 {
            break;
        }
        report.layers.push(grow_layer(vocab, &sets, l, config, &stage)?);
    }

    // object layer: coverage selection proposes, detection F-measure decides
    let engine = Engine::new(vocab)?;
    let graphs = parse_all(&engine, &sets, o - 1)?;
    let refs: Vec<&InferenceGraph> = graphs.iter().collect();
    let (duplets, pool) = candidate_pool(vocab, &refs, o, config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.stage_seed(&format!("{stage}/layer{o}")));
    let (selected, _, _) = select_candidates(&pool, config, &mut rng);
    let mut proposals: Vec<usize> = selected
        .iter()
        .copied()
        .filter(|&c| matches!(pool.candidates[c].key, CandidateKey::New { .. }))
        .collect();
    let mut by_coverage: Vec<usize> = (0..pool.len())
        .filter(|&c| matches!(pool.candidates[c].key, CandidateKey::New { .. }))
        .collect();
    by_coverage.sort_by(|&a, &b| {
        pool.candidates[b]
            .coverage
            .total_cmp(&pool.candidates[a].coverage)
            .then(a.cmp(&b))
    });
    for c in by_coverage {
        if proposals.len() >= config.multiclass.object_candidates {
            break;
        }
        if !proposals.contains(&c) {
            proposals.push(c);
        }
    }
    proposals.sort_unstable();

    let existing = if vocab.depth() >= o {
        vocab.layer(o).compositions.len()
    } else {
        0
    };
    let mut trial = vocab.clone();
    if trial.depth() < o {
        trial.layers.push(Layer::empty(o, config.layers.radius(o), config.layers.rho(o), config.inference.tau));
    }
    for &c in &proposals {
        let parts = candidate_parts(&pool.candidates[c].key, &duplets, vocab.epsilon).expect("new candidate");
        let layer = trial.layer_mut(o);
        let id = layer.compositions.len() as u32;
        layer.compositions.push(Composition::new(id, o, parts));
        layer.or_nodes.push(OrComposition { id: layer.or_nodes.len() as u32, layer: o, members: vec![id] });
    }
    let val = rescaled_validation(&class.validation, config);
    let val_images: Vec<&Plane> = val.iter().map(|c| &c.image).collect();
    let val_sets = features_of(&val_images, &bank, config)?;
    let trial_engine = Engine::new(&trial)?;
    let val_graphs = parse_all(&trial_engine, &val_sets, o)?;
    let total = trial.layer(o).compositions.len();
    let boxes = object_boxes(&val_graphs, o, total, config.multiclass.nms_iou, config.eval.box_padding)?;
    let truth: Vec<Vec<BBox>> = val.iter().map(|c| vec![c.bbox]).collect();
    let (chosen, f) = select_object_layer(
        &boxes,
        &truth,
        config.multiclass.positive_iou,
        config.multiclass.nms_iou,
        config.multiclass.f_gain_floor,
    )?;
    report.validation_f = f;

    // append the chosen new compositions, keep ids of existing ones
    if vocab.depth() < o {
        vocab.layers.push(Layer::empty(o, config.layers.radius(o), config.layers.rho(o), config.inference.tau));
    }
    let mut chosen = chosen;
    chosen.sort_unstable();
    let mut objects = Vec::new();
    let first_new = existing as u32;
    for c in chosen {
        if c < existing {
            objects.push(c as u32);
            continue;
        }
        let comp = &trial.layer(o).compositions[c];
        let layer = vocab.layer_mut(o);
        let id = layer.compositions.len() as u32;
        let mut comp = comp.clone();
        comp.id = id;
        layer.compositions.push(comp);
        layer.or_nodes.push(OrComposition { id: layer.or_nodes.len() as u32, layer: o, members: vec![id] });
        objects.push(id);
        report.added_objects.push(id);
    }
    if !report.added_objects.is_empty() {
        refine_geometry(vocab, &refs, o, first_new, config)?;
        object_appearance(vocab, &refs, o, first_new, 0.8, 0.05)?;
    }
    vocab.object_layer = o;
    objects.sort_unstable();
    vocab.classes.insert(class.name.clone(), objects.clone());
    report.objects = objects;
    log::info!(
        "class {}: {} object compositions ({} new), validation F {:.3}",
        class.name,
        report.objects.len(),
        report.added_objects.len(),
        f
    );
    Ok(report)
}

/// Generic layers from `natural`, then every class in order.
pub fn learn_incremental(
    natural: &[&Plane],
    classes: &[ClassData],
    config: &Config,
) -> Result<(Vocabulary, Vec<ClassReport>)> {
    let (mut vocab, _) = learn_generic(natural, 3, config)?;
    let mut reports = Vec::new();
    for c in classes {
        reports.push(learn_class(&mut vocab, c, config)?);
    }
    Ok((vocab, reports))
}

/// Best-scoring object state of `class` over parse graphs of one image
/// (with their scales) whose padded, reprojected support box overlaps
/// `truth` by at least `min_iou`. Returns `(graph, state, score, box)`.
pub fn positive_detection(
    vocab: &Vocabulary,
    graphs: &[(InferenceGraph, [f64; 2])],
    class: &str,
    truth: &BBox,
    min_iou: f64,
    pad: f64,
) -> Result<Option<(usize, NodeRef, f64, BBox)>> {
    let o = vocab.object_layer;
    let ids = vocab.classes.get(class).cloned().unwrap_or_default();
    let mut best: Option<(usize, NodeRef, f64, BBox)> = None;
    for (gi, (graph, scale)) in graphs.iter().enumerate() {
        if graph.depth() < o {
            continue;
        }
        for (i, s) in graph.layer(o).comps.iter().enumerate() {
            if !ids.contains(&s.id) {
                continue;
            }
            let node = NodeRef::comp(o, i as u32);
            let Some(b) = graph.support_box(node)? else { continue };
            let b = b.padded(pad);
            let b = BBox::new(b.x0 / scale[0], b.y0 / scale[1], b.x1 / scale[0], b.y1 / scale[1]);
            if crate::geometry::iou(&b, truth) >= min_iou && best.as_ref().is_none_or(|x| s.score > x.2) {
                best = Some((gi, node, s.score, b));
            }
        }
    }
    Ok(best)
}

/// One positive detection per training or validation box (or `None` when
/// the box is missed), found by the detection pipeline on the full images.
pub type Positive = (String, String, Option<(f64, BBox)>);

fn for_each_positive(
    vocab: &Vocabulary,
    classes: &[ClassData],
    config: &Config,
    mut visit: impl FnMut(&ClassData, &LabeledImage, &[(InferenceGraph, [f64; 2])], Option<(usize, NodeRef, f64, BBox)>) -> Result<()>,
) -> Result<()> {
    let detector = crate::eval::Detector::new(vocab, config)?;
    for c in classes {
        let images: Vec<&LabeledImage> = c.train.iter().chain(&c.validation).collect();
        let parsed: Vec<Vec<(InferenceGraph, [f64; 2])>> = images
            .par_iter()
            .map(|img| detector.parse(&img.image, vocab.object_layer))
            .collect::<Result<_>>()?;
        for (img, graphs) in images.iter().zip(&parsed) {
            for b in &img.boxes {
                let p = positive_detection(vocab, graphs, &c.name, b, config.multiclass.positive_iou, config.eval.box_padding)?;
                visit(c, img, graphs, p)?;
            }
        }
    }
    Ok(())
}

/// Positive detections of every training and validation box of every class.
pub fn training_positives(vocab: &Vocabulary, classes: &[ClassData], config: &Config) -> Result<Vec<Positive>> {
    let mut out = Vec::new();
    for_each_positive(vocab, classes, config, |c, img, _, p| {
        out.push((c.name.clone(), img.id.clone(), p.map(|(_, _, s, b)| (s, b))));
        Ok(())
    })?;
    Ok(out)
}

/// Learn per-composition thresholds: `safety` times the lowest score any
/// composition reaches inside the parse graph of a positive detection on
/// a training or validation image. Compositions absent from every such
/// parse graph get no threshold. Returns the number of positive detections
/// used.
pub fn learn_thresholds(vocab: &mut Vocabulary, classes: &[ClassData], safety: f64, config: &Config) -> Result<usize> {
    for layer in &mut vocab.layers {
        for c in &mut layer.compositions {
            c.threshold = None;
        }
    }
    let mut mins: Vec<Vec<Option<f64>>> = vocab
        .layers
        .iter()
        .map(|l| vec![None; l.compositions.len()])
        .collect();
    let mut positives = 0;
    for_each_positive(vocab, classes, config, |_, _, graphs, p| {
        let Some((gi, node, _, _)) = p else { return Ok(()) };
        positives += 1;
        let g = &graphs[gi].0;
        for n in g.parse_graph(node)? {
            if n.kind != crate::inference::NodeKind::Composition {
                continue;
            }
            let s = g.state(n)?;
            let slot = &mut mins[n.layer - 1][s.id as usize];
            *slot = Some(slot.map_or(s.score, |m: f64| m.min(s.score)));
        }
        Ok(())
    })?;
    if positives == 0 {
        return Err(Error::NoPositives("no positive training detections".into()));
    }
    for (layer, m) in vocab.layers.iter_mut().zip(mins) {
        for (c, v) in layer.compositions.iter_mut().zip(m) {
            c.threshold = v.map(|v| (safety * v).clamp(0.0, 1.0));
        }
    }
    Ok(positives)
}

/// Sharing at layer `l`: over OR nodes used by at least one class, the mean
/// and standard deviation of `(classes using it - 1) / (classes - 1)`.
pub fn deg_share(vocab: &Vocabulary, l: usize) -> Result<(f64, f64)> {
    let k = vocab.classes.len();
    if k < 2 {
        return Err(Error::TooFewClasses);
    }
    let n = vocab.layer(l).or_nodes.len();
    let mut counts = vec![0usize; n];
    for class in vocab.classes.keys() {
        for (i, used) in vocab.or_nodes_used_by(class, l).into_iter().enumerate() {
            if used {
                counts[i] += 1;
            }
        }
    }
    let vals: Vec<f64> = counts
        .into_iter()
        .filter(|&c| c > 0)
        .map(|c| (c - 1) as f64 / (k - 1) as f64)
        .collect();
    Ok(share_stats(&vals))
}

fn share_stats(vals: &[f64]) -> (f64, f64) {
    if vals.is_empty() {
        return (0.0, 0.0);
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
    (mean, var.sqrt())
}

/// Layer sizes and sharing of a vocabulary, as printed by `inspect`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabularySummary {
    pub layer_sizes: Vec<usize>,
    pub or_sizes: Vec<usize>,
    pub classes: Vec<String>,
    /// `(mean, stddev)` per layer from 2 up, when there are two classes or more.
    pub deg_share: Vec<Option<(f64, f64)>>,
}

pub fn summarize(vocab: &Vocabulary) -> VocabularySummary {
    VocabularySummary {
        layer_sizes: vocab.layer_sizes(),
        or_sizes: vocab.layers.iter().map(|l| l.or_nodes.len()).collect(),
        classes: vocab.classes.keys().cloned().collect(),
        deg_share: (1..=vocab.depth()).map(|l| deg_share(vocab, l).ok()).collect(),
    }
}
