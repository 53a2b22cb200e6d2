//! Synthetic line-drawing corpus: stroke rasterizer, "natural" clutter
//! images made of random polylines and arcs, and a handful of outline shape
//! classes rendered into cluttered scenes with ground-truth boxes.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{ImageRecord, LabeledImage, Manifest, Split};
use crate::error::Result;
use crate::geometry::BBox;
use crate::raster::Plane;

pub const BACKGROUND: f32 = 0.85;
pub const INK: f32 = 0.15;

#[derive(Debug, Clone, PartialEq)]
pub enum Stroke {
    Polyline { points: Vec<[f64; 2]>, closed: bool },
    Arc { center: [f64; 2], radius: f64, start: f64, end: f64 },
}

impl Stroke {
    pub fn polyline(points: Vec<[f64; 2]>) -> Stroke {
        Stroke::Polyline {
            points,
            closed: false,
        }
    }

    pub fn polygon(points: Vec<[f64; 2]>) -> Stroke {
        Stroke::Polyline {
            points,
            closed: true,
        }
    }

    /// Circular arc from `start` to `end` radians (counter-clockwise in
    /// image coordinates, i.e. with y pointing down).
    pub fn arc(center: [f64; 2], radius: f64, start: f64, end: f64) -> Stroke {
        Stroke::Arc {
            center,
            radius,
            start,
            end,
        }
    }

    /// Dense point sampling of the stroke path.
    pub fn points(&self) -> Vec<[f64; 2]> {
        match self {
            Stroke::Polyline { points, closed } => {
                let mut p = points.clone();
                if *closed && !points.is_empty() {
                    p.push(points[0]);
                }
                p
            }
            Stroke::Arc {
                center,
                radius,
                start,
                end,
            } => {
                let steps = ((end - start).abs() * radius / 2.0).ceil().max(4.0) as usize;
                (0..=steps)
                    .map(|i| {
                        let t = start + (end - start) * i as f64 / steps as f64;
                        [center[0] + radius * t.cos(), center[1] + radius * t.sin()]
                    })
                    .collect()
            }
        }
    }

    pub fn segments(&self) -> Vec<([f64; 2], [f64; 2])> {
        self.points().windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn map(&self, f: impl Fn([f64; 2]) -> [f64; 2]) -> Stroke {
        match self {
            Stroke::Polyline { points, closed } => Stroke::Polyline {
                points: points.iter().map(|&p| f(p)).collect(),
                closed: *closed,
            },
            Stroke::Arc { .. } => Stroke::polyline(self.points().into_iter().map(f).collect()),
        }
    }
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (ap[0] - t * ab[0]).hypot(ap[1] - t * ab[1])
}

/// Draw anti-aliased strokes of the given width onto a fresh background.
pub fn render_strokes(width: usize, height: usize, strokes: &[Stroke], stroke_width: f64) -> Plane {
    let mut plane = Plane::filled(width, height, BACKGROUND);
    draw_strokes(&mut plane, strokes, stroke_width);
    plane
}

pub fn draw_strokes(plane: &mut Plane, strokes: &[Stroke], stroke_width: f64) {
    let (w, h) = (plane.width() as i64, plane.height() as i64);
    let half = 0.5 * stroke_width;
    let mut coverage = vec![0.0f32; plane.data().len()];
    for stroke in strokes {
        for (a, b) in stroke.segments() {
            let x0 = ((a[0].min(b[0]) - half - 1.0).floor() as i64).max(0);
            let x1 = ((a[0].max(b[0]) + half + 1.0).ceil() as i64).min(w - 1);
            let y0 = ((a[1].min(b[1]) - half - 1.0).floor() as i64).max(0);
            let y1 = ((a[1].max(b[1]) + half + 1.0).ceil() as i64).min(h - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let d = segment_distance([x as f64, y as f64], a, b);
                    let c = (half + 0.5 - d).clamp(0.0, 1.0) as f32;
                    let i = (y * w + x) as usize;
                    if c > coverage[i] {
                        coverage[i] = c;
                    }
                }
            }
        }
    }
    for (v, c) in plane.data_mut().iter_mut().zip(coverage) {
        *v = *v * (1.0 - c) + INK * c;
    }
}

/// Tight box around the rendered strokes.
pub fn strokes_box(strokes: &[Stroke], stroke_width: f64) -> BBox {
    BBox::enclosing(strokes.iter().flat_map(|s| s.points()))
        .unwrap_or(BBox::new(0.0, 0.0, 0.0, 0.0))
        .padded(0.5 * stroke_width)
}

/// Outline shape classes of the synthetic corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeClass {
    Mug,
    Bracket,
    Ring,
    House,
    Cross,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 5] = [
        ShapeClass::Mug,
        ShapeClass::Bracket,
        ShapeClass::Ring,
        ShapeClass::House,
        ShapeClass::Cross,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Mug => "mug",
            ShapeClass::Bracket => "bracket",
            ShapeClass::Ring => "ring",
            ShapeClass::House => "house",
            ShapeClass::Cross => "cross",
        }
    }

    /// Strokes in an arbitrary unit frame.
    fn template(self) -> Vec<Stroke> {
        match self {
            ShapeClass::Mug => vec![
                Stroke::polygon(vec![[-0.3, -0.4], [0.2, -0.4], [0.2, 0.4], [-0.3, 0.4]]),
                Stroke::arc([0.2, 0.0], 0.22, -PI / 2.0, PI / 2.0),
            ],
            ShapeClass::Bracket => vec![Stroke::polygon(vec![
                [0.0, 0.0],
                [0.35, 0.0],
                [0.35, 0.65],
                [1.0, 0.65],
                [1.0, 1.0],
                [0.0, 1.0],
            ])],
            ShapeClass::Ring => {
                let hex = |r: f64| {
                    Stroke::polygon(
                        (0..6)
                            .map(|k| {
                                let t = k as f64 * PI / 3.0;
                                [r * t.cos(), r * t.sin()]
                            })
                            .collect(),
                    )
                };
                vec![hex(0.5), hex(0.28)]
            }
            ShapeClass::House => vec![
                Stroke::polygon(vec![
                    [0.0, 0.4],
                    [0.5, 0.0],
                    [1.0, 0.4],
                    [1.0, 1.0],
                    [0.0, 1.0],
                ]),
                Stroke::polyline(vec![[0.4, 1.0], [0.4, 0.7], [0.6, 0.7], [0.6, 1.0]]),
            ],
            ShapeClass::Cross => vec![Stroke::polygon(vec![
                [0.35, 0.0],
                [0.65, 0.0],
                [0.65, 0.35],
                [1.0, 0.35],
                [1.0, 0.65],
                [0.65, 0.65],
                [0.65, 1.0],
                [0.35, 1.0],
                [0.35, 0.65],
                [0.0, 0.65],
                [0.0, 0.35],
                [0.35, 0.35],
            ])],
        }
    }

    /// An instance with box diagonal `diagonal` centered at `center`, each
    /// vertex perturbed by isotropic noise of `jitter` pixels.
    pub fn instance<R: Rng>(
        self,
        diagonal: f64,
        center: [f64; 2],
        jitter: f64,
        rng: &mut R,
    ) -> Vec<Stroke> {
        let t = self.template();
        let b = strokes_box(&t, 0.0);
        let s = diagonal / b.diagonal();
        let c = b.center();
        let noise = Normal::new(0.0, jitter.max(1e-9)).expect("valid sigma");
        t.iter()
            .map(|stroke| {
                let placed = match stroke {
                    Stroke::Arc {
                        center: ac,
                        radius,
                        start,
                        end,
                    } => Stroke::arc(
                        [
                            (ac[0] - c[0]) * s + center[0] + noise.sample(rng),
                            (ac[1] - c[1]) * s + center[1] + noise.sample(rng),
                        ],
                        radius * s,
                        *start,
                        *end,
                    ),
                    other => other.map(|p| {
                        [(p[0] - c[0]) * s + center[0], (p[1] - c[1]) * s + center[1]]
                    }),
                };
                match placed {
                    Stroke::Polyline { points, closed } => Stroke::Polyline {
                        points: points
                            .into_iter()
                            .map(|p| [p[0] + noise.sample(rng), p[1] + noise.sample(rng)])
                            .collect(),
                        closed,
                    },
                    arc => arc,
                }
            })
            .collect()
    }
}

/// Random short strokes used as background clutter.
fn clutter_stroke<R: Rng>(rng: &mut R, width: f64, height: f64) -> Stroke {
    let x = rng.random_range(0.0..width);
    let y = rng.random_range(0.0..height);
    if rng.random_bool(0.3) {
        let r = rng.random_range(4.0..12.0);
        let a = rng.random_range(0.0..2.0 * PI);
        Stroke::arc([x, y], r, a, a + rng.random_range(1.0..3.0))
    } else {
        let len = rng.random_range(8.0..24.0);
        let mut pts = vec![[x, y]];
        let mut dir = rng.random_range(0.0..2.0 * PI);
        for _ in 0..rng.random_range(1..3) {
            let last = *pts.last().unwrap();
            pts.push([last[0] + len * dir.cos(), last[1] + len * dir.sin()]);
            dir += rng.random_range(-2.0..2.0);
        }
        Stroke::polyline(pts)
    }
}

/// "Natural" line drawing: random polylines with frequent right-angle turns
/// plus circular arcs.
pub fn natural_strokes<R: Rng>(rng: &mut R, width: f64, height: f64) -> Vec<Stroke> {
    let mut strokes = Vec::new();
    for _ in 0..rng.random_range(3..7) {
        let mut p = [rng.random_range(0.0..width), rng.random_range(0.0..height)];
        let mut dir = rng.random_range(0.0..2.0 * PI);
        let mut pts = vec![p];
        for _ in 0..rng.random_range(2..6) {
            let len = rng.random_range(10.0..40.0);
            p = [p[0] + len * dir.cos(), p[1] + len * dir.sin()];
            pts.push(p);
            let turn = if rng.random_bool(0.5) {
                if rng.random_bool(0.5) {
                    PI / 2.0
                } else {
                    -PI / 2.0
                }
            } else {
                rng.random_range(-2.6..2.6)
            };
            dir += turn;
        }
        strokes.push(Stroke::polyline(pts));
    }
    for _ in 0..rng.random_range(1..4) {
        let c = [rng.random_range(0.0..width), rng.random_range(0.0..height)];
        let r = rng.random_range(6.0..25.0);
        let a = rng.random_range(0.0..2.0 * PI);
        strokes.push(Stroke::arc(c, r, a, a + rng.random_range(1.0..5.0)));
    }
    strokes
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub classes: usize,
    pub natural: usize,
    pub natural_size: usize,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    pub image_size: usize,
    pub object_diagonal: f64,
    /// Relative spread of the instance size.
    pub scale_jitter: f64,
    /// Vertex noise in pixels.
    pub vertex_jitter: f64,
    pub clutter: usize,
    pub stroke_width: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 3,
            natural: 200,
            natural_size: 128,
            train: 20,
            validation: 10,
            test: 20,
            image_size: 256,
            object_diagonal: 110.0,
            scale_jitter: 0.08,
            vertex_jitter: 1.0,
            clutter: 8,
            stroke_width: 1.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthClass {
    pub name: String,
    pub train: Vec<LabeledImage>,
    pub validation: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub natural: Vec<LabeledImage>,
    pub classes: Vec<SynthClass>,
}

impl SynthCorpus {
    /// All test images of all classes, in class order.
    pub fn test_images(&self) -> Vec<&LabeledImage> {
        self.classes.iter().flat_map(|c| c.test.iter()).collect()
    }
}

/// One cluttered scene holding a single instance of `shape`.
pub fn scene<R: Rng>(
    shape: ShapeClass,
    cfg: &SynthConfig,
    rng: &mut R,
    id: String,
) -> LabeledImage {
    let size = cfg.image_size as f64;
    let diag = cfg.object_diagonal * (1.0 + rng.random_range(-cfg.scale_jitter..=cfg.scale_jitter));
    let margin = 0.5 * diag + 8.0;
    let center = [
        rng.random_range(margin..size - margin),
        rng.random_range(margin..size - margin),
    ];
    let object = shape.instance(diag, center, cfg.vertex_jitter, rng);
    let bbox = strokes_box(&object, cfg.stroke_width);
    let mut strokes = object;
    let keep_out = bbox.padded(6.0);
    let mut placed = 0;
    let mut attempts = 0;
    while placed < cfg.clutter && attempts < 200 {
        attempts += 1;
        let s = clutter_stroke(rng, size, size);
        let b = strokes_box(std::slice::from_ref(&s), cfg.stroke_width);
        if crate::geometry::iou(&b, &keep_out) == 0.0 {
            strokes.push(s);
            placed += 1;
        }
    }
    LabeledImage {
        id,
        image: render_strokes(cfg.image_size, cfg.image_size, &strokes, cfg.stroke_width),
        class: Some(shape.name().to_string()),
        boxes: vec![bbox],
    }
}

pub fn natural_image<R: Rng>(cfg: &SynthConfig, rng: &mut R, id: String) -> LabeledImage {
    let s = cfg.natural_size as f64;
    let strokes = natural_strokes(rng, s, s);
    LabeledImage {
        id,
        image: render_strokes(cfg.natural_size, cfg.natural_size, &strokes, cfg.stroke_width),
        class: None,
        boxes: Vec::new(),
    }
}

pub fn generate(cfg: &SynthConfig, seed: u64) -> SynthCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let natural = (0..cfg.natural)
        .map(|i| natural_image(cfg, &mut rng, format!("natural_{i:04}")))
        .collect();
    let classes = ShapeClass::ALL
        .iter()
        .take(cfg.classes.min(ShapeClass::ALL.len()))
        .map(|&shape| {
            let mut split = |name: &str, n: usize| -> Vec<LabeledImage> {
                (0..n)
                    .map(|i| scene(shape, cfg, &mut rng, format!("{}_{name}_{i:03}", shape.name())))
                    .collect()
            };
            let train = split("train", cfg.train);
            let validation = split("val", cfg.validation);
            let test = split("test", cfg.test);
            SynthClass {
                name: shape.name().to_string(),
                train,
                validation,
                test,
            }
        })
        .collect();
    SynthCorpus { natural, classes }
}

/// Save every image as PNG under `dir` and write `dir/manifest.jsonl`.
pub fn write_corpus(corpus: &SynthCorpus, dir: impl AsRef<Path>) -> Result<Manifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("images"))?;
    let mut records = Vec::new();
    let mut emit = |img: &LabeledImage, split: Split| -> Result<()> {
        let path = dir.join("images").join(format!("{}.png", img.id));
        img.image.save(&path)?;
        records.push(ImageRecord {
            path,
            class: img.class.clone(),
            split,
            boxes: img
                .boxes
                .iter()
                .map(|b| [b.x0, b.y0, b.x1, b.y1])
                .collect(),
        });
        Ok(())
    };
    for img in &corpus.natural {
        emit(img, Split::Natural)?;
    }
    for class in &corpus.classes {
        for img in &class.train {
            emit(img, Split::Train)?;
        }
        for img in &class.validation {
            emit(img, Split::Validation)?;
        }
        for img in &class.test {
            emit(img, Split::Test)?;
        }
    }
    let manifest = Manifest { records };
    manifest.save(dir.join("manifest.jsonl"))?;
    Ok(manifest)
}
