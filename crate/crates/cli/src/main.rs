//! `shapehier`: learn compositional shape vocabularies and detect objects
//! with them.

mod output;
mod render;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use shapehier::dataset::{LabeledImage, Manifest, Split};
use shapehier::eval::{
    classification_features, curves_svg, evaluate, Detection, Detector, ImageTruth,
};
use shapehier::features::{build_gabor_bank, extract_features, FeatureSet};
use shapehier::multiclass::{learn_class, learn_generic, learn_thresholds, summarize, ClassData};
use shapehier::synth::{generate, write_corpus, SynthConfig};
use shapehier::vocabulary as format;
use shapehier::{Config, Engine, Plane, Vocabulary};

use output::{write_atomic, OutputDir};

#[derive(Parser)]
#[command(name = "shapehier", version, about = "Learned hierarchical shape vocabularies for object detection")]
struct Cli {
    /// Configuration file (TOML); built-in defaults otherwise.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic shape corpus with its manifest and config.
    Synth(SynthArgs),
    /// Compute oriented edge features of every image into a content-addressed cache.
    Extract(ExtractArgs),
    /// Learn layers 1 up to `--top` from the unlabeled (natural) images.
    LearnGeneric(LearnGenericArgs),
    /// Append classes to a vocabulary: layers above the generic ones and the class layer.
    LearnClass(LearnClassArgs),
    /// Learn per-composition pruning thresholds from training detections.
    Thresholds(ThresholdArgs),
    /// Detect objects in every image of a split.
    Detect(DetectArgs),
    /// Score detections against the manifest's ground truth.
    Evaluate(EvaluateArgs),
    /// Spatial histogram features of OR-node responses for every image.
    ClassifyFeatures(ClassifyArgs),
    /// Layer sizes, sharing and storage size of a vocabulary.
    Inspect(InspectArgs),
    /// Pictures of compositions, detections or vocabulary sharing.
    #[command(subcommand)]
    Render(RenderCommand),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    /// Defaults to the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
    #[arg(long)]
    natural: Option<usize>,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Cache directory; one file per image and feature configuration.
    #[arg(long)]
    cache: PathBuf,
}

#[derive(Args)]
struct LearnGenericArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Highest generic layer.
    #[arg(long, default_value_t = 3)]
    top: usize,
}

#[derive(Args)]
struct LearnClassArgs {
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Class to append (repeatable); every manifest class not yet in the vocabulary if omitted.
    #[arg(long = "class")]
    classes: Vec<String>,
    /// Defaults to overwriting `--vocab`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ThresholdArgs {
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Fraction of the lowest positive score kept as threshold.
    #[arg(long)]
    safety: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Detections as JSON lines, one image per line.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    detections: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// IoU needed for a match; configured value if omitted.
    #[arg(long)]
    iou: Option<f64>,
    /// Report as JSON.
    #[arg(long)]
    out: PathBuf,
    /// Precision-recall curves as SVG.
    #[arg(long)]
    svg: Option<PathBuf>,
}

#[derive(Args)]
struct ClassifyArgs {
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Layer whose OR nodes are pooled; configured value if omitted.
    #[arg(long)]
    layer: Option<usize>,
    /// CSV: image id, class, features.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    vocab: PathBuf,
    /// Print the summary as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Subcommand)]
enum RenderCommand {
    /// Mean shape of every composition of a layer, one PNG each.
    Compositions {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 96)]
        size: u32,
    },
    /// Detections and ground truth drawn over every image, one PNG each.
    Detections {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Only detections scoring at least this much.
        #[arg(long, default_value_t = 0.0)]
        min_score: f64,
    },
    /// OR nodes reachable from the classes and how many classes share each.
    Sharing {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SplitArg {
    Natural,
    Train,
    Validation,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Natural => Split::Natural,
            SplitArg::Train => Split::Train,
            SplitArg::Validation => Split::Validation,
            SplitArg::Test => Split::Test,
        }
    }
}

/// One line of a detections file.
#[derive(Debug, Serialize, Deserialize)]
struct ImageDetections {
    image: String,
    detections: Vec<Detection>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let config = match &cli.config {
        Some(p) => Config::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => Config::default(),
    };
    match cli.command {
        Command::Synth(a) => synth(&config, a),
        Command::Extract(a) => extract(&config, a),
        Command::LearnGeneric(a) => {
            let manifest = load_manifest(&a.manifest)?;
            let natural = images(&manifest, Split::Natural, None)?;
            let planes: Vec<&Plane> = natural.iter().map(|i| &i.image).collect();
            let (vocab, _) = learn_generic(&planes, a.top, &config)?;
            save_vocab(&vocab, &a.out)?;
            println!("layers {:?}", vocab.layer_sizes());
            Ok(())
        }
        Command::LearnClass(a) => {
            let manifest = load_manifest(&a.manifest)?;
            let mut vocab = load_vocab(&a.vocab)?;
            let names = if a.classes.is_empty() {
                manifest
                    .classes()
                    .into_iter()
                    .filter(|c| !vocab.classes.contains_key(c))
                    .collect()
            } else {
                a.classes
            };
            if names.is_empty() {
                bail!("no classes to learn");
            }
            for name in &names {
                let data = class_data(&manifest, name)?;
                let report = learn_class(&mut vocab, &data, &config)?;
                println!(
                    "{name}: {} object composition(s), {} new, validation F {:.3}",
                    report.objects.len(),
                    report.added_objects.len(),
                    report.validation_f
                );
            }
            save_vocab(&vocab, a.out.as_ref().unwrap_or(&a.vocab))?;
            println!("layers {:?}", vocab.layer_sizes());
            Ok(())
        }
        Command::Thresholds(a) => {
            let manifest = load_manifest(&a.manifest)?;
            let mut vocab = load_vocab(&a.vocab)?;
            let classes = vocab
                .classes
                .keys()
                .map(|c| class_data(&manifest, c))
                .collect::<Result<Vec<_>>>()?;
            let safety = a.safety.unwrap_or(config.multiclass.safety_fraction);
            let n = learn_thresholds(&mut vocab, &classes, safety, &config)?;
            save_vocab(&vocab, a.out.as_ref().unwrap_or(&a.vocab))?;
            println!("thresholds from {n} positive detection(s), safety {safety}");
            Ok(())
        }
        Command::Detect(a) => detect(&config, a),
        Command::Evaluate(a) => evaluate_cmd(&config, a),
        Command::ClassifyFeatures(a) => classify(&config, a),
        Command::Inspect(a) => inspect(a),
        Command::Render(r) => render_cmd(r),
    }
}

fn load_manifest(path: &Path) -> Result<Manifest> {
    Manifest::load(path).with_context(|| format!("reading manifest {}", path.display()))
}

fn load_vocab(path: &Path) -> Result<Vocabulary> {
    format::load(path).with_context(|| format!("reading vocabulary {}", path.display()))
}

fn save_vocab(vocab: &Vocabulary, path: &Path) -> Result<()> {
    write_atomic(path, &format::to_bytes(vocab)?)
}

fn images(manifest: &Manifest, split: Split, class: Option<&str>) -> Result<Vec<LabeledImage>> {
    let records = manifest.select(split, class);
    if records.is_empty() {
        bail!(
            "manifest has no {split:?} images{}",
            class.map(|c| format!(" of class {c:?}")).unwrap_or_default()
        );
    }
    Ok(Manifest::load_images(&records)?)
}

fn class_data(manifest: &Manifest, name: &str) -> Result<ClassData> {
    Ok(ClassData {
        name: name.to_string(),
        train: images(manifest, Split::Train, Some(name))?,
        validation: Manifest::load_images(&manifest.select(Split::Validation, Some(name)))?,
    })
}

fn synth(config: &Config, a: SynthArgs) -> Result<()> {
    let mut sc = SynthConfig {
        classes: a.classes,
        ..SynthConfig::default()
    };
    if let Some(n) = a.train {
        sc.train = n;
    }
    if let Some(n) = a.test {
        sc.test = n;
    }
    if let Some(n) = a.natural {
        sc.natural = n;
    }
    let seed = a.seed.unwrap_or(config.seed);
    let dir = OutputDir::create(&a.out)?;
    let corpus = generate(&sc, seed);
    let manifest = write_corpus(&corpus, dir.path())?;
    // settings matching the corpus's object size, for the later stages
    let mut cfg = Config::synthetic();
    cfg.seed = seed;
    write_atomic(&dir.path().join("config.toml"), cfg.to_toml().as_bytes())?;
    dir.commit();
    println!(
        "{} images, {} classes in {}",
        manifest.records.len(),
        corpus.classes.len(),
        a.out.display()
    );
    Ok(())
}

/// Cache key of one image under one feature configuration.
fn feature_key(image_bytes: &[u8], config: &Config) -> Result<String> {
    let mut h = Sha256::new();
    h.update(b"features-v1\0");
    h.update(serde_json::to_vec(&config.features)?);
    h.update(image_bytes);
    let mut s = String::with_capacity(64);
    for b in h.finalize() {
        let _ = write!(s, "{b:02x}");
    }
    Ok(s)
}

fn extract(config: &Config, a: ExtractArgs) -> Result<()> {
    let manifest = load_manifest(&a.manifest)?;
    std::fs::create_dir_all(&a.cache)?;
    let bank = build_gabor_bank(&config.features.gabor)?;
    let outcomes: Vec<Result<bool>> = manifest
        .records
        .par_iter()
        .map(|r| {
            let bytes = std::fs::read(&r.path).with_context(|| format!("reading {}", r.path.display()))?;
            let path = a.cache.join(format!("{}.json", feature_key(&bytes, config)?));
            if path.exists() {
                return Ok(false);
            }
            let image = Plane::load(&r.path)?;
            let fs: FeatureSet = extract_features(&image, &bank, config.features.min_energy)?;
            write_atomic(&path, &serde_json::to_vec(&fs)?)?;
            Ok(true)
        })
        .collect();
    let mut computed = 0;
    for o in outcomes {
        computed += usize::from(o?);
    }
    println!(
        "{} image(s): {computed} extracted, {} cached",
        manifest.records.len(),
        manifest.records.len() - computed
    );
    Ok(())
}

fn detect(config: &Config, a: DetectArgs) -> Result<()> {
    let vocab = load_vocab(&a.vocab)?;
    if vocab.classes.is_empty() {
        bail!("vocabulary has no classes");
    }
    let manifest = load_manifest(&a.manifest)?;
    let imgs = images(&manifest, a.split.into(), None)?;
    let detector = Detector::new(&vocab, config)?;
    let results: Vec<Result<ImageDetections>> = imgs
        .iter()
        .map(|img| {
            Ok(ImageDetections {
                image: img.id.clone(),
                detections: detector.detect(&img.image)?.detections,
            })
        })
        .collect();
    let mut out = String::new();
    let mut total = 0;
    for r in results {
        let r = r?;
        total += r.detections.len();
        out.push_str(&serde_json::to_string(&r)?);
        out.push('\n');
    }
    write_atomic(&a.out, out.as_bytes())?;
    println!("{total} detection(s) in {} image(s)", imgs.len());
    Ok(())
}

fn read_detections(path: &Path) -> Result<BTreeMap<String, Vec<Detection>>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let d: ImageDetections = serde_json::from_str(line)
            .with_context(|| format!("{}:{}", path.display(), i + 1))?;
        if out.insert(d.image.clone(), d.detections).is_some() {
            bail!("{} lists image {:?} twice", path.display(), d.image);
        }
    }
    Ok(out)
}

fn evaluate_cmd(config: &Config, a: EvaluateArgs) -> Result<()> {
    let manifest = load_manifest(&a.manifest)?;
    let mut dets_by_image = read_detections(&a.detections)?;
    let records = manifest.select(a.split.into(), None);
    if records.is_empty() {
        bail!("manifest has no images in the requested split");
    }
    let mut dets = Vec::new();
    let mut truth = Vec::new();
    for r in &records {
        let id = r.id();
        dets.push(dets_by_image.remove(&id).unwrap_or_default());
        let class = r.class.clone().unwrap_or_default();
        truth.push(ImageTruth {
            id,
            boxes: r.bboxes().into_iter().map(|b| (class.clone(), b)).collect(),
        });
    }
    if let Some(extra) = dets_by_image.keys().next() {
        bail!("detections for image {extra:?} which is not in the split");
    }
    let mut cfg = config.clone();
    if let Some(iou) = a.iou {
        cfg.eval.iou_threshold = iou;
    }
    let classes = manifest.classes();
    let report = evaluate(&dets, &truth, &classes, &cfg)?;
    write_atomic(&a.out, report.to_json().as_bytes())?;
    if let Some(svg) = &a.svg {
        if let Err(e) = write_atomic(svg, curves_svg(&report).as_bytes()) {
            let _ = std::fs::remove_file(&a.out);
            return Err(e);
        }
    }
    for (name, c) in &report.classes {
        println!(
            "{name}: recall@EER {:.3}, rate at {} FPPI {:.3} ({} positives, {} detections)",
            c.recall_at_eer, report.fppi, c.rate_at_fppi, c.positives, c.detections
        );
    }
    Ok(())
}

fn classify(config: &Config, a: ClassifyArgs) -> Result<()> {
    let vocab = load_vocab(&a.vocab)?;
    let layer = a.layer.unwrap_or(config.eval.classification_layer);
    if layer < 1 || layer > vocab.depth() {
        bail!("vocabulary has no layer {layer}");
    }
    let manifest = load_manifest(&a.manifest)?;
    let imgs = images(&manifest, a.split.into(), None)?;
    let bank = build_gabor_bank(&config.features.gabor)?;
    let engine = Engine::new(&vocab)?;
    let or_nodes = vocab.layer(layer).or_nodes.len();
    let rows: Vec<Result<String>> = imgs
        .par_iter()
        .map(|img| {
            let fs = extract_features(&img.image, &bank, config.features.min_energy)?;
            let graph = engine.infer(&fs, layer)?;
            let f = classification_features(&graph, or_nodes, layer);
            let mut row = format!("{},{}", img.id, img.class.as_deref().unwrap_or(""));
            for v in f {
                let _ = write!(row, ",{v:.6}");
            }
            Ok(row)
        })
        .collect();
    let mut out = String::new();
    for r in rows {
        out.push_str(&r?);
        out.push('\n');
    }
    write_atomic(&a.out, out.as_bytes())?;
    println!("{} image(s), {} feature(s) each", imgs.len(), 10 * or_nodes);
    Ok(())
}

#[derive(Serialize)]
struct InspectReport {
    layer_sizes: Vec<usize>,
    or_sizes: Vec<usize>,
    classes: BTreeMap<String, Vec<u32>>,
    /// `[mean, stddev]` per layer, null when undefined.
    deg_share: Vec<Option<(f64, f64)>>,
    storage_bytes: usize,
    thresholds: usize,
}

fn inspect(a: InspectArgs) -> Result<()> {
    let vocab = load_vocab(&a.vocab)?;
    let summary = summarize(&vocab);
    // layers up to the object layer are always listed
    let depth = vocab.object_layer.max(vocab.depth());
    let pad = |v: &[usize]| -> Vec<usize> { (0..depth).map(|i| v.get(i).copied().unwrap_or(0)).collect() };
    let report = InspectReport {
        layer_sizes: pad(&summary.layer_sizes),
        or_sizes: pad(&summary.or_sizes),
        classes: vocab.classes.clone(),
        deg_share: summary.deg_share,
        storage_bytes: format::to_bytes(&vocab)?.len(),
        thresholds: vocab
            .layers
            .iter()
            .flat_map(|l| &l.compositions)
            .filter(|c| c.threshold.is_some())
            .count(),
    };
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
        return Ok(());
    }
    for (i, (n, o)) in report.layer_sizes.iter().zip(&report.or_sizes).enumerate() {
        let share = match report.deg_share.get(i).copied().flatten() {
            Some((m, s)) => format!(", deg_share {m:.3} +- {s:.3}"),
            None => String::new(),
        };
        println!("layer {}: {n} compositions, {o} OR nodes{share}", i + 1);
    }
    for (c, ids) in &report.classes {
        println!("class {c}: {} object composition(s)", ids.len());
    }
    println!("thresholds: {}", report.thresholds);
    println!("storage: {} bytes", report.storage_bytes);
    Ok(())
}

fn render_cmd(r: RenderCommand) -> Result<()> {
    match r {
        RenderCommand::Compositions { vocab, layer, out, size } => {
            let vocab = load_vocab(&vocab)?;
            if layer < 1 || layer > vocab.depth() {
                bail!("vocabulary has no layer {layer}");
            }
            let dir = OutputDir::create(&out)?;
            let n = vocab.layer(layer).compositions.len();
            for c in 0..n as u32 {
                let img = render::composition_image(&vocab, layer, c, size);
                img.save(dir.path().join(format!("layer{layer}_{c:04}.png")))?;
            }
            dir.commit();
            println!("{n} composition(s) rendered");
        }
        RenderCommand::Detections { manifest, detections, out, min_score } => {
            let manifest = load_manifest(&manifest)?;
            let dets = read_detections(&detections)?;
            let dir = OutputDir::create(&out)?;
            let mut n = 0;
            for r in &manifest.records {
                let Some(d) = dets.get(&r.id()) else { continue };
                let d: Vec<Detection> = d.iter().filter(|d| d.score >= min_score).cloned().collect();
                let image = Plane::load(&r.path)?;
                render::overlay(&image, &r.bboxes(), &d).save(dir.path().join(format!("{}.png", r.id())))?;
                n += 1;
            }
            dir.commit();
            println!("{n} overlay(s) rendered");
        }
        RenderCommand::Sharing { vocab, out } => {
            let vocab = load_vocab(&vocab)?;
            write_atomic(&out, render::sharing_svg(&vocab).as_bytes())?;
        }
    }
    Ok(())
}
