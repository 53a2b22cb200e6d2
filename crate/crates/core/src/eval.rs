//! Detection with a class vocabulary and its evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::features::{build_gabor_bank, extract_pyramid, rescale, GaborBank};
use crate::geometry::{iou, BBox};
use crate::inference::{Engine, InferenceGraph, NodeRef};
use crate::raster::Plane;
use crate::vocabulary::Vocabulary;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class: String,
    pub bbox: BBox,
    pub score: f64,
    /// Object-layer composition that fired.
    pub comp: u32,
    pub level: usize,
}

/// Greedy suppression over all classes: highest score first, a detection
/// is dropped when it overlaps a kept one by more than `max_iou`.
pub fn suppress_detections(mut dets: Vec<Detection>, max_iou: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.class.cmp(&b.class))
            .then(a.comp.cmp(&b.comp))
            .then(a.level.cmp(&b.level))
    });
    let mut kept: Vec<Detection> = Vec::new();
    for d in dets {
        if kept.iter().all(|k| iou(&k.bbox, &d.bbox) <= max_iou) {
            kept.push(d);
        }
    }
    kept
}

/// A compiled vocabulary plus filter bank, ready for detection.
pub struct Detector {
    pub engine: Engine,
    pub bank: GaborBank,
    pub config: Config,
    vocab: Vocabulary,
    /// Classes owning each object-layer composition.
    owners: Vec<Vec<String>>,
}

/// Result of running the detector on one image.
#[derive(Debug, Clone)]
pub struct ImageResult {
    pub detections: Vec<Detection>,
    /// States over all layers and pyramid levels.
    pub states: usize,
}

impl Detector {
    pub fn new(vocab: &Vocabulary, config: &Config) -> Result<Detector> {
        let mut owners = Vec::new();
        if vocab.depth() >= vocab.object_layer {
            owners = vec![Vec::new(); vocab.layer(vocab.object_layer).compositions.len()];
            for (class, ids) in &vocab.classes {
                for &c in ids {
                    if let Some(o) = owners.get_mut(c as usize) {
                        o.push(class.clone());
                    }
                }
            }
        }
        Ok(Detector {
            owners,
            engine: Engine::new(vocab)?,
            bank: build_gabor_bank(&config.features.gabor)?,
            config: config.clone(),
            vocab: vocab.clone(),
        })
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    /// Parse graphs of every pyramid level with their (x, y) scale relative
    /// to the input image.
    pub fn parse(&self, image: &Plane, up_to: usize) -> Result<Vec<(InferenceGraph, [f64; 2])>> {
        let up = self.config.pyramid.upscale;
        let big = rescale(image, up);
        let sx = big.width() as f64 / image.width() as f64;
        let sy = big.height() as f64 / image.height() as f64;
        let levels = extract_pyramid(&big, &self.bank, &self.config.features, &self.config.pyramid)?;
        let mut out = Vec::with_capacity(levels.len());
        for (level, fs) in levels {
            let g = self.engine.infer(&fs, up_to)?;
            out.push((g, [level.scale_x * sx, level.scale_y * sy]));
        }
        Ok(out)
    }

    /// Object detections in input-image coordinates, suppressed across
    /// classes and scales.
    pub fn detect(&self, image: &Plane) -> Result<ImageResult> {
        let o = self.vocab.object_layer;
        let graphs = self.parse(image, o)?;
        let pad = self.config.eval.box_padding;
        let mut dets = Vec::new();
        let mut states = 0;
        for (g, scale) in &graphs {
            states += g.state_count();
            if g.depth() < o {
                continue;
            }
            for (i, s) in g.layer(o).comps.iter().enumerate() {
                let owners = self.owners.get(s.id as usize).map(|v| v.as_slice()).unwrap_or(&[]);
                if owners.is_empty() {
                    continue;
                }
                let Some(b) = g.support_box(NodeRef::comp(o, i as u32))? else { continue };
                let b = b.padded(pad);
                let bbox = BBox::new(b.x0 / scale[0], b.y0 / scale[1], b.x1 / scale[0], b.y1 / scale[1]);
                for class in owners {
                    dets.push(Detection {
                        class: class.clone(),
                        bbox,
                        score: s.score,
                        comp: s.id,
                        level: g.scale_index,
                    });
                }
            }
        }
        Ok(ImageResult {
            detections: suppress_detections(dets, self.config.multiclass.nms_iou),
            states,
        })
    }
}

/// Ground truth of one evaluation image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTruth {
    pub id: String,
    pub boxes: Vec<(String, BBox)>,
}

/// One point of a class's detection curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
    pub fppi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub positives: usize,
    pub detections: usize,
    pub recall_at_eer: f64,
    /// Detection rate at the configured false positives per image.
    pub rate_at_fppi: f64,
    pub curve: Vec<CurvePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: usize,
    pub iou_threshold: f64,
    pub fppi: f64,
    pub classes: BTreeMap<String, ClassReport>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Recall where recall equals precision, interpolated linearly along the
/// curve starting from (recall 0, precision 1). Curves that never reach
/// the crossing give their final recall.
pub fn recall_at_eer(curve: &[CurvePoint]) -> f64 {
    let mut prev = (0.0, 1.0);
    for p in curve {
        let (r0, p0) = prev;
        let (r1, p1) = (p.recall, p.precision);
        let d0 = r0 - p0;
        let d1 = r1 - p1;
        if d1 >= 0.0 {
            if d1 == d0 {
                return r1;
            }
            let t = d0 / (d0 - d1);
            return r0 + t * (r1 - r0);
        }
        prev = (r1, p1);
    }
    curve.last().map(|p| p.recall).unwrap_or(0.0)
}

/// Highest recall whose false positives per image do not exceed `fppi`.
pub fn rate_at_fppi(curve: &[CurvePoint], fppi: f64) -> f64 {
    curve
        .iter()
        .filter(|p| p.fppi <= fppi + 1e-12)
        .map(|p| p.recall)
        .fold(0.0, f64::max)
}

/// Detection curve of one class: detections sorted by score, each matched
/// greedily to the unmatched truth box of its image with the highest IoU
/// at or above `min_iou`; everything else (duplicates included) is a
/// false positive. One point per distinct score.
pub fn class_curve(
    class: &str,
    detections: &[Vec<Detection>],
    truth: &[ImageTruth],
    min_iou: f64,
) -> (Vec<CurvePoint>, usize, usize) {
    let images = truth.len().max(1) as f64;
    let gt: Vec<Vec<BBox>> = truth
        .iter()
        .map(|t| t.boxes.iter().filter(|b| b.0 == class).map(|b| b.1).collect())
        .collect();
    let positives: usize = gt.iter().map(|g| g.len()).sum();
    let mut all: Vec<(f64, usize, usize)> = detections
        .iter()
        .enumerate()
        .flat_map(|(i, ds)| {
            ds.iter()
                .enumerate()
                .filter(|(_, d)| d.class == class)
                .map(move |(k, d)| (d.score, i, k))
        })
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used: Vec<Vec<bool>> = gt.iter().map(|g| vec![false; g.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut curve = Vec::new();
    for (idx, &(score, i, k)) in all.iter().enumerate() {
        let b = &detections[i][k].bbox;
        let mut arg = None;
        let mut best = min_iou;
        for (j, t) in gt[i].iter().enumerate() {
            let v = iou(b, t);
            if !used[i][j] && v >= best {
                best = v;
                arg = Some(j);
            }
        }
        match arg {
            Some(j) => {
                used[i][j] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        if all.get(idx + 1).is_none_or(|n| n.0 < score) {
            curve.push(CurvePoint {
                threshold: score,
                recall: if positives == 0 { 0.0 } else { tp as f64 / positives as f64 },
                precision: tp as f64 / (tp + fp) as f64,
                fppi: fp as f64 / images,
            });
        }
    }
    (curve, positives, all.len())
}

/// Per-class curves, recall at EER and detection rate at the configured
/// FPPI. `detections[i]` belong to `truth[i]`; false positives are counted
/// over all images.
pub fn evaluate(
    detections: &[Vec<Detection>],
    truth: &[ImageTruth],
    classes: &[String],
    config: &Config,
) -> Result<EvalReport> {
    let mut seen = std::collections::BTreeSet::new();
    for t in truth {
        if !seen.insert(t.id.as_str()) {
            return Err(Error::DuplicateImage(t.id.clone()));
        }
    }
    if detections.len() != truth.len() {
        return Err(Error::EmptyDataset(format!(
            "{} detection lists for {} images",
            detections.len(),
            truth.len()
        )));
    }
    let ev = &config.eval;
    let mut out = BTreeMap::new();
    for c in classes {
        let (curve, positives, n) = class_curve(c, detections, truth, ev.iou_threshold);
        out.insert(
            c.clone(),
            ClassReport {
                positives,
                detections: n,
                recall_at_eer: recall_at_eer(&curve),
                rate_at_fppi: rate_at_fppi(&curve, ev.fppi),
                curve,
            },
        );
    }
    Ok(EvalReport {
        images: truth.len(),
        iou_threshold: ev.iou_threshold,
        fppi: ev.fppi,
        classes: out,
    })
}

pub const ANGULAR_CELLS: usize = 5;
pub const RADIAL_CELLS: usize = 2;

/// Image descriptor from the OR states of `layer`: the image is split
/// around its center into 5 angular sectors and 2 rings (inner ring up to
/// half the half-diagonal); each (cell, OR node) entry sums the
/// scores of its states there. Length `10 * OR nodes`.
pub fn classification_features(graph: &InferenceGraph, or_nodes: usize, layer: usize) -> Vec<f64> {
    let cells = ANGULAR_CELLS * RADIAL_CELLS;
    let mut out = vec![0.0; cells * or_nodes];
    if graph.depth() < layer {
        return out;
    }
    let g = graph.layer(layer);
    let cx = (graph.width as f64 - 1.0) * 0.5;
    let cy = (graph.height as f64 - 1.0) * 0.5;
    let half_diag = cx.hypot(cy).max(1e-9);
    for s in &g.ors {
        if s.id as usize >= or_nodes {
            continue;
        }
        let x = s.loc[0] as f64 / g.scale - cx;
        let y = s.loc[1] as f64 / g.scale - cy;
        let a = y.atan2(x).rem_euclid(std::f64::consts::TAU);
        let ac = ((a / std::f64::consts::TAU * ANGULAR_CELLS as f64) as usize).min(ANGULAR_CELLS - 1);
        let rc = usize::from(x.hypot(y) > 0.5 * half_diag);
        let cell = rc * ANGULAR_CELLS + ac;
        out[cell * or_nodes + s.id as usize] += s.score;
    }
    out
}

/// Precision-recall curves of every class as a standalone SVG.
pub fn curves_svg(report: &EvalReport) -> String {
    let (w, h, m) = (420.0, 320.0, 40.0);
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let (pw, ph) = (w - 2.0 * m, h - 2.0 * m);
    let _ = writeln!(
        s,
        r#"<rect x="{m}" y="{m}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">recall</text>"#, w / 2.0, h - 10.0);
    let _ = writeln!(s, r#"<text x="12" y="{}" font-size="12" transform="rotate(-90 12 {})" text-anchor="middle">precision</text>"#, h / 2.0, h / 2.0);
    for (k, (name, c)) in report.classes.iter().enumerate() {
        let color = colors[k % colors.len()];
        let mut pts = vec![format!("{:.2},{:.2}", m, m)];
        for p in &c.curve {
            pts.push(format!("{:.2},{:.2}", m + p.recall * pw, m + (1.0 - p.precision) * ph));
        }
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="11" fill="{color}">{name} (EER recall {:.2})</text>"#,
            m + 8.0,
            m + 16.0 + 14.0 * k as f64,
            c.recall_at_eer
        );
    }
    s.push_str("</svg>\n");
    s
}

/// One line per detection: `image class score x0 y0 x1 y1`.
pub fn detection_lines(image: &str, dets: &[Detection]) -> String {
    let mut s = String::new();
    for d in dets {
        let _ = writeln!(
            s,
            "{image} {} {:.6} {:.2} {:.2} {:.2} {:.2}",
            d.class, d.score, d.bbox.x0, d.bbox.y0, d.bbox.x1, d.bbox.y1
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(class: &str, score: f64, b: [f64; 4]) -> Detection {
        Detection {
            class: class.into(),
            bbox: BBox::new(b[0], b[1], b[2], b[3]),
            score,
            comp: 0,
            level: 0,
        }
    }

    fn point(r: f64, p: f64) -> CurvePoint {
        CurvePoint {
            threshold: 0.0,
            recall: r,
            precision: p,
            fppi: 0.0,
        }
    }

    #[test]
    fn eer_interpolates_crossing() {
        let c = [point(0.5, 1.0), point(1.0, 0.5)];
        assert!((recall_at_eer(&c) - 0.75).abs() < 1e-12);
        let never = [point(0.3, 1.0), point(0.6, 0.9)];
        assert_eq!(recall_at_eer(&never), 0.6);
        assert_eq!(recall_at_eer(&[]), 0.0);
    }

    #[test]
    fn duplicates_are_false_positives() {
        let truth = vec![ImageTruth {
            id: "a".into(),
            boxes: vec![("x".into(), BBox::new(0.0, 0.0, 10.0, 10.0))],
        }];
        let dets = vec![vec![det("x", 0.9, [0.0, 0.0, 10.0, 10.0]), det("x", 0.8, [0.0, 0.0, 10.0, 10.0])]];
        let (curve, pos, n) = class_curve("x", &dets, &truth, 0.5);
        assert_eq!((pos, n), (1, 2));
        assert_eq!(curve[0].recall, 1.0);
        assert_eq!(curve[1].precision, 0.5);
        assert_eq!(curve[1].fppi, 1.0);
    }

    #[test]
    fn suppression_crosses_classes() {
        let d = vec![det("a", 0.5, [0.0, 0.0, 10.0, 10.0]), det("b", 0.9, [1.0, 0.0, 11.0, 10.0])];
        let kept = suppress_detections(d, 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].class, "b");
    }
}
