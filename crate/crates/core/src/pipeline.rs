//! The three training stages, the baselines and the scripted experiments.
//!
//! Output layout under the run directory:
//!
//! ```text
//! inputs/        desk-generated inputs (only those not given by `paths.*`)
//! checkpoints/   source_detector, generator_adapted, discriminator_adapted,
//!                label_head, detector_adapted
//! dataset/       synthesized images + annotations.json
//! manifest.json
//! ```
//!
//! Stage iii only ever reads `dataset/`, never the few-shot images.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Tensor};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::adaptation::{adapt_generator as adapt_loop, AdaptTrace};
use crate::config::{FactoryConfig, RunManifest, StageRecord, StageStatus};
use crate::dataset_io::{self, image_file_name, quantize_chw, Category, Dataset};
use crate::desk::{self, grounded_embedder};
use crate::detector::{train_detector, Detector, DetectorTrainConfig, DetectorTrainTrace};
use crate::discriminator::Discriminator;
use crate::embedding::{EmbedderKind, JointEmbedder};
use crate::error::{FactoryError, Result};
use crate::evaluation::{pairwise_diversity, MatchResult};
use crate::generator::{Generator, LatentCode};
use crate::label_synthesis::{predict_labels, train_label_head, LabelHead, LabelSet, LabelTrainTrace};
use crate::ops;
use crate::params::Tracking;
use crate::rng::derive_seed;
use crate::shapes::{self, Style};

pub const STAGE_SOURCE: &str = "source_pretraining";
pub const STAGE_SYNTHESIS: &str = "synthesis";
pub const STAGE_ADAPTATION: &str = "target_adaptation";

const CHUNK: usize = 50;

#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn inputs(&self) -> PathBuf {
        self.root.join("inputs")
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.ckpt"))
    }

    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    fn ensure(&self) -> Result<()> {
        for d in [self.root.clone(), self.root.join("checkpoints"), self.inputs()] {
            std::fs::create_dir_all(&d).map_err(|e| FactoryError::io(&d, e))?;
        }
        Ok(())
    }
}

pub fn build_embedder(cfg: &FactoryConfig) -> Result<Box<dyn JointEmbedder>> {
    match cfg.embedder.kind {
        EmbedderKind::Toy => Ok(Box::new(grounded_embedder(cfg.embedder.dim, cfg.embedder.seed, cfg.generator.output_side())?)),
        EmbedderKind::External => cfg.embedder.build(),
    }
}

/// `n` consecutive latent seeds from a named block of the run seed.
pub fn seed_block(run_seed: u64, label: &str, n: usize) -> Vec<u64> {
    let base = derive_seed(run_seed, label) % 1_000_000_000_000;
    (0..n as u64).map(|k| base + k).collect()
}

pub fn latents_for(seeds: &[u64], z_dim: usize) -> Vec<LatentCode> {
    seeds.iter().map(|&s| LatentCode::from_seed(s, z_dim)).collect()
}

fn categories(cfg: &FactoryConfig) -> Vec<Category> {
    cfg.class_names.iter().enumerate().map(|(id, n)| Category { id, name: n.clone() }).collect()
}

/// Appends `[N, 3, H, W]` images (in `[-1, 1]`) and their labels.
fn push_images(ds: &mut Dataset, images: &Tensor, seeds: &[u64], labels: &[LabelSet]) -> Result<()> {
    let (n, _, h, w) = images.dims4()?;
    let flat = ops::to_f64_vec(images)?;
    let per = 3 * h * w;
    for k in 0..n {
        ds.push(image_file_name(seeds[k]), Some(seeds[k]), w, h, quantize_chw(&flat[k * per..(k + 1) * per], h, w), &labels[k]);
    }
    Ok(())
}

/// Procedural scenes for the given seeds, rendered in one style, with exact boxes.
pub fn desk_dataset(cfg: &FactoryConfig, seeds: &[u64], style: Style) -> Result<Dataset> {
    let side = cfg.generator.output_side();
    let mut ds = Dataset { categories: categories(cfg), ..Default::default() };
    for chunk in seeds.chunks(CHUNK) {
        let scenes = shapes::scenes_for_latents(&latents_for(chunk, cfg.generator.z_dim), side)?;
        let images = shapes::render_batch(&scenes, style, DType::F64)?;
        let labels: Vec<LabelSet> = scenes.iter().map(|s| s.labels()).collect();
        push_images(&mut ds, &images, chunk, &labels)?;
    }
    Ok(ds)
}

/// Desk stand-in for manual labeling: candidate seeds are shown to a
/// "human" who accepts one when the pretrained generator renders its scene
/// faithfully, and then writes down the scene's true boxes.
pub fn desk_manual_annotations(pretrained: &Generator, cfg: &FactoryConfig) -> Result<Vec<(u64, LabelSet)>> {
    let want = cfg.desk.manual_labels;
    let z_dim = pretrained.config().z_dim;
    let side = pretrained.output_side();
    let candidates = seed_block(cfg.seed, "manual-labels", want * 50);
    let mut out = Vec::with_capacity(want);
    for chunk in candidates.chunks(16) {
        let latents = latents_for(chunk, z_dim);
        let fidelity = desk::source_fidelity(pretrained, &latents, cfg.synth.psi)?;
        for ((&seed, z), err) in chunk.iter().zip(&latents).zip(fidelity) {
            if err <= cfg.desk.verify_mse && out.len() < want {
                out.push((seed, shapes::scene_from_latent(&z.values, side)?.labels()));
            }
        }
        if out.len() == want {
            return Ok(out);
        }
    }
    Err(FactoryError::stage(
        STAGE_SYNTHESIS,
        format!("only {} of {want} manual-label candidates passed verification (desk.verify_mse = {})", out.len(), cfg.desk.verify_mse),
    ))
}

/// Every input a run needs, as files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedInputs {
    pub generator: PathBuf,
    pub discriminator: PathBuf,
    pub source_dataset: Option<PathBuf>,
    pub source_detector: Option<PathBuf>,
    pub fewshot_dir: PathBuf,
    pub manual_annotations: PathBuf,
    pub target_test: Option<PathBuf>,
}

/// Pretrained generator and discriminator: `paths.*`, or the desk source
/// models fitted once and cached in `dir`.
pub fn resolve_pretrained(cfg: &FactoryConfig, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    match (&cfg.paths.generator, &cfg.paths.discriminator) {
        (Some(g), Some(d)) => Ok((g.clone(), d.clone())),
        (None, None) => {
            let (g, d) = (dir.join("generator_source.ckpt"), dir.join("discriminator_source.ckpt"));
            if !g.exists() || !d.exists() {
                std::fs::create_dir_all(dir).map_err(|e| FactoryError::io(dir, e))?;
                warn!("no pretrained generator configured: fitting the desk source generator (slow)");
                let (gen, disc, _) = desk::pretrain_source_models(&cfg.desk.source_pretrain, cfg.desk.pretrain_seed)?;
                gen.save(&g)?;
                disc.save(&d)?;
            }
            Ok((g, d))
        }
        _ => Err(FactoryError::config("paths.generator and paths.discriminator must be set together")),
    }
}

fn source_dataset_input(cfg: &FactoryConfig, dir: &Path) -> Result<Option<PathBuf>> {
    let p = &cfg.paths;
    Ok(match (&p.source_dataset, &p.source_detector) {
        (Some(s), _) => Some(s.clone()),
        (None, Some(_)) => None,
        (None, None) => {
            let d = dir.join("source_dataset");
            if !d.join(dataset_io::ANNOTATIONS_FILE).exists() {
                let seeds = seed_block(cfg.seed, "desk-source", cfg.desk.source_images);
                dataset_io::save_dataset(&desk_dataset(cfg, &seeds, Style::Source)?, &d)?;
            }
            Some(d)
        }
    })
}

fn target_test_input(cfg: &FactoryConfig, dir: &Path) -> Result<Option<PathBuf>> {
    Ok(match &cfg.paths.target_test {
        Some(t) => Some(t.clone()),
        None => {
            let d = dir.join("target_test");
            if !d.join(dataset_io::ANNOTATIONS_FILE).exists() {
                let seeds = seed_block(cfg.seed, "desk-target-test", cfg.desk.test_images);
                dataset_io::save_dataset(&desk_dataset(cfg, &seeds, Style::Target)?, &d)?;
            }
            Some(d)
        }
    })
}

/// Resolves `paths.*`, generating the missing inputs from the shapes benchmark.
pub fn prepare_inputs(cfg: &FactoryConfig, layout: &Layout) -> Result<ResolvedInputs> {
    layout.ensure()?;
    let dir = layout.inputs();
    let p = &cfg.paths;

    let (generator, discriminator) = resolve_pretrained(cfg, &dir)?;

    let source_dataset = source_dataset_input(cfg, &dir)?;

    let fewshot_dir = match &p.fewshot_dir {
        Some(f) => f.clone(),
        None => {
            let d = dir.join("fewshot");
            if !d.exists() {
                let seeds = seed_block(cfg.seed, "desk-fewshot", cfg.desk.fewshot_images);
                let ds = desk_dataset(cfg, &seeds, Style::Target)?;
                dataset_io::save_images(&ds.images_tensor(DType::F32)?, &d, "target")?;
            }
            d
        }
    };

    let manual_annotations = match &p.manual_annotations {
        Some(m) => m.clone(),
        None => {
            let m = dir.join("manual_annotations.json");
            if !m.exists() {
                let g = Generator::load(&generator, DType::F32)?;
                dataset_io::save_manual_annotations(&m, &desk_manual_annotations(&g, cfg)?)?;
            }
            m
        }
    };

    let target_test = target_test_input(cfg, &dir)?;

    Ok(ResolvedInputs {
        generator,
        discriminator,
        source_dataset,
        source_detector: p.source_detector.clone(),
        fewshot_dir,
        manual_annotations,
        target_test,
    })
}

// ---- stage i ----

pub fn pretrain_source_detector(source: &Dataset, cfg: &FactoryConfig) -> Result<(Detector, DetectorTrainTrace)> {
    if source.is_empty() {
        return Err(FactoryError::argument("source dataset is empty"));
    }
    let det = Detector::new(cfg.detector.clone(), DType::F32, derive_seed(cfg.seed, "source-detector"))?;
    let trace = train_detector(&det, &source.images_tensor(DType::F32)?, &source.labels(), &cfg.source_training, derive_seed(cfg.seed, "source-detector-train"))?;
    Ok((det, trace))
}

// ---- stage ii ----

/// Adapts a copy of the pretrained generator and discriminator; the inputs are untouched.
pub fn adapt_generator(pretrained: &Generator, disc: &Discriminator, fewshot: &Tensor, embedder: &dyn JointEmbedder, cfg: &FactoryConfig) -> Result<(Generator, Discriminator, AdaptTrace)> {
    let frozen = pretrained.snapshot_frozen()?;
    let mut adapted = pretrained.snapshot_frozen()?;
    let mut d = Discriminator::from_checkpoint(&disc.to_checkpoint()?, disc.params().dtype())?;
    let fewshot = ops::resize_bilinear(fewshot, pretrained.output_side(), pretrained.output_side())?;
    let trace = adapt_loop(&frozen, &mut adapted, &mut d, &fewshot, embedder, &cfg.adapt, derive_seed(cfg.seed, "adapt"))?;
    Ok((adapted, d, trace))
}

pub fn train_head(g: &Generator, manual: &[(u64, LabelSet)], cfg: &FactoryConfig) -> Result<(LabelHead, LabelTrainTrace)> {
    let z_dim = g.config().z_dim;
    let annotated: Vec<(LatentCode, LabelSet)> = manual.iter().map(|(s, l)| (LatentCode::from_seed(*s, z_dim), l.clone())).collect();
    train_label_head(g, &annotated, cfg.class_names.len(), cfg.synth.psi, &cfg.label, derive_seed(cfg.seed, "label-head"))
}

/// Images from `g` for the given latent seeds, labels to be filled in by the caller.
pub fn generator_images(g: &Generator, seeds: &[u64], psi: f64) -> Result<Vec<Tensor>> {
    let none = BTreeSet::new();
    seeds
        .chunks(CHUNK)
        .map(|chunk| Ok(g.generate(&latents_for(chunk, g.config().z_dim), psi, &none, Tracking::Off)?.images))
        .collect()
}

pub fn synthesis_seeds(cfg: &FactoryConfig, n: usize) -> Vec<u64> {
    seed_block(cfg.seed, "synthesis", n)
}

/// `n` images from `g` labeled by the label head.
pub fn synthesize_dataset(g: &Generator, head: &LabelHead, cfg: &FactoryConfig, n: usize) -> Result<Dataset> {
    let seeds = synthesis_seeds(cfg, n);
    let mut ds = Dataset { categories: categories(cfg), ..Default::default() };
    for (chunk, images) in seeds.chunks(CHUNK).zip(generator_images(g, &seeds, cfg.synth.psi)?) {
        let dets = predict_labels(g, head, &latents_for(chunk, g.config().z_dim), cfg.synth.psi, &cfg.label)?;
        let labels: Vec<LabelSet> = dets.iter().map(|d| d.iter().map(|x| x.label).collect()).collect();
        push_images(&mut ds, &images, chunk, &labels)?;
    }
    Ok(ds)
}

/// Same images as [`synthesize_dataset`], labeled by a detector instead.
pub fn pseudo_label_dataset(g: &Generator, detector: &Detector, cfg: &FactoryConfig, n: usize) -> Result<Dataset> {
    let seeds = synthesis_seeds(cfg, n);
    let mut ds = Dataset { categories: categories(cfg), ..Default::default() };
    for (chunk, images) in seeds.chunks(CHUNK).zip(generator_images(g, &seeds, cfg.synth.psi)?) {
        push_images(&mut ds, &images, chunk, &vec![vec![]; chunk.len()])?;
    }
    let dets = detector.detect(&ds.images_tensor(DType::F32)?, &cfg.label.decode)?;
    let mut labeled = Dataset { categories: ds.categories.clone(), ..Default::default() };
    for (img, d) in ds.images.into_iter().zip(dets) {
        let labels: LabelSet = d.iter().map(|x| x.label).collect();
        labeled.push(img.file_name, img.seed, img.width, img.height, img.pixels, &labels);
    }
    Ok(labeled)
}

/// Images of the manually labeled seeds with their manual boxes.
pub fn manual_dataset(g: &Generator, manual: &[(u64, LabelSet)], cfg: &FactoryConfig) -> Result<Dataset> {
    let seeds: Vec<u64> = manual.iter().map(|m| m.0).collect();
    let labels: Vec<LabelSet> = manual.iter().map(|m| m.1.clone()).collect();
    let mut ds = Dataset { categories: categories(cfg), ..Default::default() };
    for ((chunk, lab), images) in seeds.chunks(CHUNK).zip(labels.chunks(CHUNK)).zip(generator_images(g, &seeds, cfg.synth.psi)?) {
        push_images(&mut ds, &images, chunk, lab)?;
    }
    Ok(ds)
}

/// Pairwise embedding diversity of `eval.diversity_samples` generator samples.
pub fn synthesis_diversity(g: &Generator, embedder: &dyn JointEmbedder, cfg: &FactoryConfig) -> Result<f64> {
    let seeds = seed_block(cfg.seed, "diversity", cfg.eval.diversity_samples);
    let images = Tensor::cat(&generator_images(g, &seeds, cfg.synth.psi)?, 0)?;
    pairwise_diversity(&images, embedder)
}

// ---- stage iii ----

pub fn finetune_detector(source: &Detector, ds: &Dataset, train: &DetectorTrainConfig, seed: u64) -> Result<(Detector, DetectorTrainTrace)> {
    if ds.is_empty() {
        return Err(FactoryError::argument("fine-tuning dataset is empty"));
    }
    let det = source.deep_copy()?;
    let trace = train_detector(&det, &ds.images_tensor(DType::F32)?, &ds.labels(), train, derive_seed(seed, "finetune"))?;
    Ok((det, trace))
}

pub fn evaluate_detector(det: &Detector, test: &Dataset, cfg: &FactoryConfig) -> Result<MatchResult> {
    det.evaluate(&test.images_tensor(DType::F32)?, &test.labels(), &cfg.eval.decode, cfg.eval.iou_thresh)
}

fn record_ap(metrics: &mut BTreeMap<String, f64>, prefix: &str, r: &MatchResult, cfg: &FactoryConfig) {
    if let Some(ap) = r.mean_ap() {
        metrics.insert(format!("{prefix}.ap"), ap);
    }
    for (c, res) in &r.per_class {
        let name = cfg.class_names.get(*c).cloned().unwrap_or_else(|| c.to_string());
        metrics.insert(format!("{prefix}.ap.{name}"), res.ap);
    }
}

// ---- run_all ----

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Reuse completed stages of a previous run with the same config.
    pub resume: bool,
}

fn run_stage<T>(manifest: &mut RunManifest, layout: &Layout, name: &str, f: impl FnOnce(&mut StageRecord, &mut RunManifest) -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let mut rec = StageRecord {
        status: StageStatus::Completed,
        seconds: 0.0,
        traces: BTreeMap::new(),
        note: None,
    };
    let out = f(&mut rec, manifest);
    rec.seconds = start.elapsed().as_secs_f64();
    match out {
        Ok(v) => {
            manifest.stages.insert(name.to_string(), rec);
            manifest.save(&layout.manifest())?;
            info!("stage {name} done in {:.1}s", manifest.stages[name].seconds);
            Ok(v)
        }
        Err(e) => {
            rec.status = StageStatus::Failed;
            rec.note = Some(e.to_string());
            manifest.stages.insert(name.to_string(), rec);
            manifest.save(&layout.manifest())?;
            Err(match e {
                FactoryError::Stage { .. } | FactoryError::Config(_) => e,
                other => FactoryError::stage(name, other.to_string()),
            })
        }
    }
}

fn trace_of(records: &AdaptTrace) -> BTreeMap<String, Vec<f64>> {
    let mut t = BTreeMap::new();
    t.insert("adapt.total".into(), records.records.iter().map(|r| r.total).collect());
    t.insert("adapt.adversarial".into(), records.records.iter().map(|r| r.adversarial).collect());
    t.insert("adapt.distance".into(), records.records.iter().map(|r| r.distance).collect());
    t.insert("adapt.direction".into(), records.records.iter().map(|r| r.direction).collect());
    t.insert("adapt.d_loss".into(), records.records.iter().map(|r| r.d_loss).collect());
    t
}

/// Stages i–iii in order. With `resume`, stages recorded as completed in an
/// existing manifest for the same config are reloaded from their checkpoints.
pub fn run_all(cfg: &FactoryConfig, out: &Path, opts: RunOptions) -> Result<RunManifest> {
    cfg.validate()?;
    let layout = Layout::new(out);
    layout.ensure()?;
    let hash = cfg.hash()?;
    let mut manifest = match RunManifest::load(&layout.manifest()) {
        Ok(m) if opts.resume && m.config_hash == hash => m,
        Ok(_) if opts.resume => {
            warn!("existing manifest has a different config; starting over");
            RunManifest::new(cfg)?
        }
        _ => RunManifest::new(cfg)?,
    };
    let inputs = prepare_inputs(cfg, &layout)?;
    let test = inputs.target_test.as_deref().map(dataset_io::load_dataset).transpose()?;
    let reuse = |m: &RunManifest, stage: &str, files: &[PathBuf]| opts.resume && m.stage_completed(stage) && files.iter().all(|f| f.exists());

    // stage i
    let det_path = layout.checkpoint("source_detector");
    let source_det = if reuse(&manifest, STAGE_SOURCE, &[det_path.clone()]) {
        info!("resuming: {STAGE_SOURCE} reloaded");
        Detector::load(&det_path, DType::F32)?
    } else {
        run_stage(&mut manifest, &layout, STAGE_SOURCE, |rec, m| {
            let det = match (&inputs.source_detector, &inputs.source_dataset) {
                (Some(p), _) => Detector::load(p, DType::F32)?,
                (None, Some(d)) => {
                    let (det, trace) = pretrain_source_detector(&dataset_io::load_dataset(d)?, cfg)?;
                    m.metrics.insert("source_detector.final_loss".into(), *trace.losses.last().unwrap_or(&f64::NAN));
                    rec.traces.insert("source_detector.loss".into(), trace.losses);
                    det
                }
                (None, None) => return Err(FactoryError::config("no source dataset or source detector")),
            };
            if let Some(t) = &test {
                record_ap(&mut m.metrics, "source_only.target", &evaluate_detector(&det, t, cfg)?, cfg);
            }
            det.save(&det_path)?;
            Ok(det)
        })?
    };

    // stage ii
    let files = ["generator_adapted", "discriminator_adapted", "label_head"].map(|n| layout.checkpoint(n));
    let ds_file = layout.dataset().join(dataset_io::ANNOTATIONS_FILE);
    if reuse(&manifest, STAGE_SYNTHESIS, &[files[0].clone(), files[1].clone(), files[2].clone(), ds_file.clone()]) {
        info!("resuming: {STAGE_SYNTHESIS} reloaded");
    } else {
        run_stage(&mut manifest, &layout, STAGE_SYNTHESIS, |rec, m| {
            let pretrained = Generator::load(&inputs.generator, DType::F32)?;
            let disc = Discriminator::load(&inputs.discriminator, DType::F32)?;
            let (_, fewshot) = dataset_io::load_fewshot_images(&inputs.fewshot_dir, pretrained.output_side())?;
            let embedder = build_embedder(cfg)?;
            let (g_t, d_t, trace) = adapt_generator(&pretrained, &disc, &fewshot, embedder.as_ref(), cfg)?;
            rec.traces.extend(trace_of(&trace));
            let side = g_t.output_side();
            let manual = dataset_io::load_manual_annotations(&inputs.manual_annotations, side, side, cfg.class_names.len())?;
            let (head, head_trace) = train_head(&g_t, &manual, cfg)?;
            m.metrics.insert("label_head.final_loss".into(), *head_trace.losses.last().unwrap_or(&f64::NAN));
            rec.traces.insert("label_head.loss".into(), head_trace.losses);
            let ds = synthesize_dataset(&g_t, &head, cfg, cfg.synth.n_samples)?;
            dataset_io::save_dataset(&ds, &layout.dataset())?;
            m.checksums.insert("dataset".into(), ds.checksum()?);
            m.metrics.insert("synthesis.diversity".into(), synthesis_diversity(&g_t, embedder.as_ref(), cfg)?);
            m.metrics.insert("synthesis.boxes_per_image".into(), ds.annotations.len() as f64 / ds.len() as f64);
            g_t.save(&files[0])?;
            d_t.save(&files[1])?;
            head.save(&files[2])?;
            m.checksums.insert("generator_adapted".into(), checkpoint_digest(&files[0])?);
            Ok(())
        })?;
    }

    // stage iii
    let adapted_path = layout.checkpoint("detector_adapted");
    if reuse(&manifest, STAGE_ADAPTATION, &[adapted_path.clone()]) {
        info!("resuming: {STAGE_ADAPTATION} reloaded");
    } else {
        run_stage(&mut manifest, &layout, STAGE_ADAPTATION, |rec, m| {
            let ds = dataset_io::load_dataset(&layout.dataset())?;
            let (det, trace) = finetune_detector(&source_det, &ds, &cfg.finetune, cfg.seed)?;
            m.metrics.insert("finetune.final_loss".into(), *trace.losses.last().unwrap_or(&f64::NAN));
            rec.traces.insert("finetune.loss".into(), trace.losses);
            if let Some(t) = &test {
                record_ap(&mut m.metrics, "adapted.target", &evaluate_detector(&det, t, cfg)?, cfg);
            }
            det.save(&adapted_path)?;
            m.checksums.insert("detector_adapted".into(), checkpoint_digest(&adapted_path)?);
            Ok(())
        })?;
    }
    manifest.save(&layout.manifest())?;
    Ok(manifest)
}

pub fn checkpoint_digest(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path).map_err(|e| FactoryError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

// ---- desk benchmark ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSeed {
    pub seed: u64,
    pub source_only: f64,
    pub full: f64,
    pub fewshot_ft: f64,
    pub pseudo_label: f64,
    /// Target AP after fine-tuning on the first `n` synthesized samples.
    pub by_samples: BTreeMap<usize, f64>,
    pub diversity_freeze: f64,
    pub diversity_no_freeze: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub seeds: Vec<BenchmarkSeed>,
    pub mean: BTreeMap<String, f64>,
}

fn mean_of(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn ap_or_zero(r: &MatchResult) -> f64 {
    r.mean_ap().unwrap_or(0.0)
}

/// The shapes experiment: source-only, full pipeline, few-shot fine-tuning,
/// pseudo-labels, sample counts and the freezing ablation, per seed.
pub fn run_benchmark(cfg: &FactoryConfig, seeds: &[u64], sample_counts: &[usize], out: &Path) -> Result<BenchmarkReport> {
    cfg.validate()?;
    let layout = Layout::new(out);
    layout.ensure()?;
    let mut results = Vec::new();
    let (g_path, d_path) = resolve_pretrained(cfg, &layout.inputs())?;
    for &seed in seeds {
        let start = Instant::now();
        let mut cfg = FactoryConfig { seed, ..cfg.clone() };
        cfg.paths.generator = Some(g_path.clone());
        cfg.paths.discriminator = Some(d_path.clone());
        let inputs = prepare_inputs(&cfg, &Layout::new(out.join(format!("seed_{seed}"))))?;
        let pretrained = Generator::load(&inputs.generator, DType::F32)?;
        let disc = Discriminator::load(&inputs.discriminator, DType::F32)?;
        let test = dataset_io::load_dataset(inputs.target_test.as_deref().ok_or_else(|| FactoryError::config("benchmark needs a target test set"))?)?;
        let source = dataset_io::load_dataset(inputs.source_dataset.as_deref().ok_or_else(|| FactoryError::config("benchmark needs a source dataset"))?)?;
        let (_, fewshot) = dataset_io::load_fewshot_images(&inputs.fewshot_dir, pretrained.output_side())?;
        let manual = dataset_io::load_manual_annotations(&inputs.manual_annotations, pretrained.output_side(), pretrained.output_side(), cfg.class_names.len())?;
        let embedder = build_embedder(&cfg)?;

        let (source_det, _) = pretrain_source_detector(&source, &cfg)?;
        let source_only = ap_or_zero(&evaluate_detector(&source_det, &test, &cfg)?);

        let (g_t, _, _) = adapt_generator(&pretrained, &disc, &fewshot, embedder.as_ref(), &cfg)?;
        let (head, _) = train_head(&g_t, &manual, &cfg)?;
        let n_max = sample_counts.iter().copied().chain([cfg.synth.n_samples]).max().unwrap_or(cfg.synth.n_samples);
        let synth = synthesize_dataset(&g_t, &head, &cfg, n_max)?;
        let tune = |ds: &Dataset| -> Result<f64> {
            let (det, _) = finetune_detector(&source_det, ds, &cfg.finetune, cfg.seed)?;
            Ok(ap_or_zero(&evaluate_detector(&det, &test, &cfg)?))
        };
        let full = tune(&synth.take(cfg.synth.n_samples))?;
        let mut by_samples = BTreeMap::new();
        for &n in sample_counts {
            let ap = if n == cfg.synth.n_samples { full } else { tune(&synth.take(n))? };
            by_samples.insert(n, ap);
        }
        let pseudo_label = tune(&pseudo_label_dataset(&g_t, &source_det, &cfg, cfg.synth.n_samples)?)?;
        let fewshot_ft = tune(&manual_dataset(&g_t, &manual, &cfg)?)?;
        let diversity_freeze = synthesis_diversity(&g_t, embedder.as_ref(), &cfg)?;

        let nf_cfg = ablation_config(&cfg, AblationMode::NoFreeze);
        let (g_nf, _, _) = adapt_generator(&pretrained, &disc, &fewshot, embedder.as_ref(), &nf_cfg)?;
        let diversity_no_freeze = synthesis_diversity(&g_nf, embedder.as_ref(), &nf_cfg)?;

        let r = BenchmarkSeed {
            seed,
            source_only,
            full,
            fewshot_ft,
            pseudo_label,
            by_samples,
            diversity_freeze,
            diversity_no_freeze,
            seconds: start.elapsed().as_secs_f64(),
        };
        info!("benchmark seed {seed}: {r:?}");
        results.push(r);
    }
    let mut mean = BTreeMap::new();
    mean.insert("source_only".into(), mean_of(results.iter().map(|r| r.source_only)));
    mean.insert("full".into(), mean_of(results.iter().map(|r| r.full)));
    mean.insert("fewshot_ft".into(), mean_of(results.iter().map(|r| r.fewshot_ft)));
    mean.insert("pseudo_label".into(), mean_of(results.iter().map(|r| r.pseudo_label)));
    mean.insert("diversity_freeze".into(), mean_of(results.iter().map(|r| r.diversity_freeze)));
    mean.insert("diversity_no_freeze".into(), mean_of(results.iter().map(|r| r.diversity_no_freeze)));
    for &n in sample_counts {
        mean.insert(format!("samples_{n}"), mean_of(results.iter().map(|r| r.by_samples[&n])));
    }
    let report = BenchmarkReport { seeds: results, mean };
    let mut text = serde_json::to_vec_pretty(&report)?;
    text.push(b'\n');
    crate::checkpoint::write_atomic(&out.join("benchmark.json"), &text)?;
    Ok(report)
}

// ---- ablations ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationMode {
    NoText,
    NoFewshot,
    NoFreeze,
    SamplesSweep,
}

pub const SWEEP_COUNTS: [usize; 4] = [25, 50, 100, 200];

pub fn ablation_config(cfg: &FactoryConfig, mode: AblationMode) -> FactoryConfig {
    let mut c = cfg.clone();
    match mode {
        AblationMode::NoText => c.adapt.lambda_2 = 0.0,
        AblationMode::NoFewshot => {
            c.adapt.use_adversarial = false;
            c.adapt.lambda_1 = 0.0;
        }
        AblationMode::NoFreeze => c.adapt.freeze = false,
        AblationMode::SamplesSweep => c.synth.n_samples = SWEEP_COUNTS[SWEEP_COUNTS.len() - 1].max(c.synth.n_samples),
    }
    c
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub mode: AblationMode,
    /// Metrics of the reference run and the ablated run (same seed).
    pub baseline: BTreeMap<String, f64>,
    pub ablated: BTreeMap<String, f64>,
}

/// Runs the pipeline with and without the ablated component. The samples
/// sweep runs once and fine-tunes on growing prefixes of the synthesized set.
pub fn run_ablation(cfg: &FactoryConfig, mode: AblationMode, out: &Path) -> Result<AblationReport> {
    let base = run_all(cfg, &out.join("baseline"), RunOptions { resume: true })?;
    let report = match mode {
        AblationMode::SamplesSweep => {
            let c = ablation_config(cfg, mode);
            let dir = out.join("sweep");
            run_all(&c, &dir, RunOptions { resume: true })?;
            let layout = Layout::new(&dir);
            let ds = dataset_io::load_dataset(&layout.dataset())?;
            let source = Detector::load(&layout.checkpoint("source_detector"), DType::F32)?;
            let inputs = prepare_inputs(&c, &layout)?;
            let test = dataset_io::load_dataset(inputs.target_test.as_deref().ok_or_else(|| FactoryError::config("samples sweep needs a target test set"))?)?;
            let mut ablated = BTreeMap::new();
            for n in SWEEP_COUNTS {
                let (det, _) = finetune_detector(&source, &ds.take(n), &c.finetune, c.seed)?;
                ablated.insert(format!("samples_{n}.target.ap"), ap_or_zero(&evaluate_detector(&det, &test, &c)?));
            }
            AblationReport { mode, baseline: base.metrics, ablated }
        }
        _ => {
            let m = run_all(&ablation_config(cfg, mode), &out.join("ablated"), RunOptions { resume: true })?;
            AblationReport { mode, baseline: base.metrics, ablated: m.metrics }
        }
    };
    let mut text = serde_json::to_vec_pretty(&report)?;
    text.push(b'\n');
    crate::checkpoint::write_atomic(&out.join("ablation.json"), &text)?;
    Ok(report)
}

// ---- single-operation commands ----

fn open_manifest(cfg: &FactoryConfig, layout: &Layout) -> Result<RunManifest> {
    layout.ensure()?;
    match RunManifest::load(&layout.manifest()) {
        Ok(m) if m.config_hash == cfg.hash()? => Ok(m),
        _ => RunManifest::new(cfg),
    }
}

fn or_default(given: Option<&Path>, fallback: PathBuf) -> PathBuf {
    given.map(Path::to_path_buf).unwrap_or(fallback)
}

/// Fits the desk source generator and discriminator into `checkpoints/`.
pub fn cmd_pretrain_generator(cfg: &FactoryConfig, out: &Path) -> Result<()> {
    let layout = Layout::new(out);
    let mut manifest = open_manifest(cfg, &layout)?;
    run_stage(&mut manifest, &layout, "desk_source_generator", |rec, m| {
        let (g, d, trace) = desk::pretrain_source_models(&cfg.desk.source_pretrain, cfg.desk.pretrain_seed)?;
        g.save(&layout.checkpoint("generator_source"))?;
        d.save(&layout.checkpoint("discriminator_source"))?;
        m.metrics.insert("source_generator.final_mse".into(), *trace.regression.last().unwrap_or(&f64::NAN));
        rec.traces.insert("source_generator.mse".into(), trace.regression);
        rec.traces.insert("source_discriminator.loss".into(), trace.discriminator);
        Ok(())
    })
}

/// Stage i alone.
pub fn cmd_pretrain_source(cfg: &FactoryConfig, out: &Path) -> Result<()> {
    let layout = Layout::new(out);
    let mut manifest = open_manifest(cfg, &layout)?;
    let dir = layout.inputs();
    let source = source_dataset_input(cfg, &dir)?;
    let target_test = target_test_input(cfg, &dir)?;
    run_stage(&mut manifest, &layout, STAGE_SOURCE, |rec, m| {
        let src = source.as_deref().ok_or_else(|| FactoryError::config("pretrain-source needs paths.source_dataset"))?;
        let (det, trace) = pretrain_source_detector(&dataset_io::load_dataset(src)?, cfg)?;
        m.metrics.insert("source_detector.final_loss".into(), *trace.losses.last().unwrap_or(&f64::NAN));
        rec.traces.insert("source_detector.loss".into(), trace.losses);
        if let Some(t) = &target_test {
            record_ap(&mut m.metrics, "source_only.target", &evaluate_detector(&det, &dataset_io::load_dataset(t)?, cfg)?, cfg);
        }
        det.save(&layout.checkpoint("source_detector"))
    })
}

/// Stage ii, image branch.
pub fn cmd_adapt(cfg: &FactoryConfig, out: &Path) -> Result<()> {
    let layout = Layout::new(out);
    let mut manifest = open_manifest(cfg, &layout)?;
    let inputs = prepare_inputs(cfg, &layout)?;
    run_stage(&mut manifest, &layout, "adapt", |rec, m| {
        let pretrained = Generator::load(&inputs.generator, DType::F32)?;
        let disc = Discriminator::load(&inputs.discriminator, DType::F32)?;
        let (_, fewshot) = dataset_io::load_fewshot_images(&inputs.fewshot_dir, pretrained.output_side())?;
        let embedder = build_embedder(cfg)?;
        let (g_t, d_t, trace) = adapt_generator(&pretrained, &disc, &fewshot, embedder.as_ref(), cfg)?;
        rec.traces.extend(trace_of(&trace));
        m.metrics.insert("synthesis.diversity".into(), synthesis_diversity(&g_t, embedder.as_ref(), cfg)?);
        g_t.save(&layout.checkpoint("generator_adapted"))?;
        d_t.save(&layout.checkpoint("discriminator_adapted"))
    })
}

/// Stage ii, label branch.
pub fn cmd_label_train(cfg: &FactoryConfig, out: &Path, generator: Option<&Path>) -> Result<()> {
    let layout = Layout::new(out);
    let mut manifest = open_manifest(cfg, &layout)?;
    let inputs = prepare_inputs(cfg, &layout)?;
    run_stage(&mut manifest, &layout, "label_train", |rec, m| {
        let g = Generator::load(&or_default(generator, layout.checkpoint("generator_adapted")), DType::F32)?;
        let side = g.output_side();
        let manual = dataset_io::load_manual_annotations(&inputs.manual_annotations, side, side, cfg.class_names.len())?;
        let (head, trace) = train_head(&g, &manual, cfg)?;
        m.metrics.insert("label_head.final_loss".into(), *trace.losses.last().unwrap_or(&f64::NAN));
        rec.traces.insert("label_head.loss".into(), trace.losses);
        head.save(&layout.checkpoint("label_head"))
    })
}

pub fn cmd_synthesize(cfg: &FactoryConfig, out: &Path, generator: Option<&Path>, head: Option<&Path>) -> Result<()> {
    let layout = Layout::new(out);
    let mut manifest = open_manifest(cfg, &layout)?;
    run_stage(&mut manifest, &layout, "synthesize", |_, m| {
        let g = Generator::load(&or_default(generator, layout.checkpoint("generator_adapted")), DType::F32)?;
        let head = LabelHead::load(&or_default(head, layout.checkpoint("label_head")), DType::F32)?;
        let ds = synthesize_dataset(&g, &head, cfg, cfg.synth.n_samples)?;
        dataset_io::save_dataset(&ds, &layout.dataset())?;
        m.checksums.insert("dataset".into(), ds.checksum()?);
        Ok(())
    })
}

pub fn cmd_pseudo_label(cfg: &FactoryConfig, out: &Path, generator: Option<&Path>, detector: Option<&Path>) -> Result<()> {
    let layout = Layout::new(out);
    let mut manifest = open_manifest(cfg, &layout)?;
    run_stage(&mut manifest, &layout, "pseudo_label", |_, m| {
        let g = Generator::load(&or_default(generator, layout.checkpoint("generator_adapted")), DType::F32)?;
        let det = Detector::load(&or_default(detector, layout.checkpoint("source_detector")), DType::F32)?;
        let ds = pseudo_label_dataset(&g, &det, cfg, cfg.synth.n_samples)?;
        dataset_io::save_dataset(&ds, &out.join("dataset_pseudo"))?;
        m.checksums.insert("dataset_pseudo".into(), ds.checksum()?);
        Ok(())
    })
}

/// Stage iii alone.
pub fn cmd_finetune(cfg: &FactoryConfig, out: &Path, detector: Option<&Path>, dataset: Option<&Path>) -> Result<()> {
    let layout = Layout::new(out);
    let mut manifest = open_manifest(cfg, &layout)?;
    run_stage(&mut manifest, &layout, STAGE_ADAPTATION, |rec, m| {
        let source = Detector::load(&or_default(detector, layout.checkpoint("source_detector")), DType::F32)?;
        let ds = dataset_io::load_dataset(&or_default(dataset, layout.dataset()))?;
        let (det, trace) = finetune_detector(&source, &ds, &cfg.finetune, cfg.seed)?;
        m.metrics.insert("finetune.final_loss".into(), *trace.losses.last().unwrap_or(&f64::NAN));
        rec.traces.insert("finetune.loss".into(), trace.losses);
        det.save(&layout.checkpoint("detector_adapted"))
    })
}

/// AP of a detector on a labeled dataset; also written to `evaluation.json`.
pub fn cmd_evaluate(cfg: &FactoryConfig, out: &Path, detector: &Path, dataset: &Path) -> Result<BTreeMap<String, f64>> {
    let det = Detector::load(detector, DType::F32)?;
    let ds = dataset_io::load_dataset(dataset)?;
    let mut metrics = BTreeMap::new();
    record_ap(&mut metrics, "eval", &evaluate_detector(&det, &ds, cfg)?, cfg);
    std::fs::create_dir_all(out).map_err(|e| FactoryError::io(out, e))?;
    let mut text = serde_json::to_vec_pretty(&metrics)?;
    text.push(b'\n');
    crate::checkpoint::write_atomic(&out.join("evaluation.json"), &text)?;
    Ok(metrics)
}
