//! Compact keypoint detector used for downstream training and evaluation.
//!
//! Backbone at image side `S`: conv at `S`, pool, conv at `S/2`, pool, conv at
//! `S/4`, upsample and concatenate with the `S/2` map, fuse. The label head
//! then predicts heatmap, offsets and sizes on the `S/2` grid (stride 2).

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use log::{debug, info};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{ensure_finite, FactoryError, Result};
use crate::evaluation::{average_precision, MatchResult};
use crate::generator::header_usize;
use crate::label_synthesis::{decode, detection_loss, splat_targets, BoxLabel, DecodeConfig, Detection, LabelHead, LabelSet, LossWeights, PredictionTensors, TargetTensors};
use crate::ops::conv2d_same;
use crate::optim::OptimizerConfig;
use crate::params::{ParamStore, Tracking};
use crate::rng::{self, FactoryRng};

pub const DETECTOR_STRIDE: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub image_side: usize,
    pub num_classes: usize,
    /// Widths of the three backbone stages.
    pub channels: [usize; 3],
    pub fuse_channels: usize,
    pub head_hidden: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            image_side: 32,
            num_classes: 2,
            channels: [16, 32, 32],
            fuse_channels: 32,
            head_hidden: 16,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_side < 8 || self.image_side % 4 != 0 {
            return Err(FactoryError::config(format!("detector image side {} must be a multiple of 4 and >= 8", self.image_side)));
        }
        if self.num_classes == 0 || self.channels.contains(&0) || self.fuse_channels == 0 || self.head_hidden == 0 {
            return Err(FactoryError::config("detector widths must be positive"));
        }
        Ok(())
    }

    pub fn heatmap_side(&self) -> usize {
        self.image_side / DETECTOR_STRIDE
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorTrainConfig {
    pub iters: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub loss: LossWeights,
    pub min_overlap: f64,
    pub flip: bool,
    pub augment: PhotometricAugment,
}

/// Per-sample photometric augmentation applied to detector training batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhotometricAugment {
    /// Probability of a 3x3 binomial blur.
    pub blur: f64,
    /// Probability of replacing the colors by their luma.
    pub grayscale: f64,
    /// Probability of a random RGB channel permutation.
    pub channel_shuffle: f64,
}

impl Default for PhotometricAugment {
    fn default() -> Self {
        Self { blur: 0.0, grayscale: 0.0, channel_shuffle: 0.0 }
    }
}

impl PhotometricAugment {
    pub fn is_identity(&self) -> bool {
        self.blur <= 0.0 && self.grayscale <= 0.0 && self.channel_shuffle <= 0.0
    }

    /// Augments a `[B, 3, H, W]` batch one sample at a time.
    pub fn apply(&self, images: &Tensor, rng: &mut FactoryRng) -> Result<Tensor> {
        if self.is_identity() {
            return Ok(images.clone());
        }
        let b = images.dim(0)?;
        let mut out = Vec::with_capacity(b);
        for i in 0..b {
            let mut x = images.narrow(0, i, 1)?;
            if rng.random_bool(self.channel_shuffle.clamp(0.0, 1.0)) {
                let mut perm = vec![0u32, 1, 2];
                perm.shuffle(rng);
                x = x.index_select(&Tensor::from_vec(perm, 3, &Device::Cpu)?, 1)?;
            }
            if rng.random_bool(self.grayscale.clamp(0.0, 1.0)) {
                let luma = Tensor::from_vec(vec![0.299f32, 0.587, 0.114], (1, 3, 1, 1), &Device::Cpu)?.to_dtype(x.dtype())?;
                x = x.broadcast_mul(&luma)?.sum_keepdim(1)?.repeat((1, 3, 1, 1))?;
            }
            if rng.random_bool(self.blur.clamp(0.0, 1.0)) {
                x = binomial_blur(&x)?;
            }
            out.push(x);
        }
        Ok(Tensor::cat(&out, 0)?)
    }
}

/// Depthwise `[1 2 1]^T [1 2 1] / 16` blur with replicated borders.
fn binomial_blur(x: &Tensor) -> Result<Tensor> {
    let c = x.dim(1)?;
    let k: Vec<f32> = [1.0, 2.0, 1.0, 2.0, 4.0, 2.0, 1.0, 2.0, 1.0].iter().map(|v| v / 16.0).collect();
    let kernel = Tensor::from_vec(k.repeat(c), (c, 1, 3, 3), &Device::Cpu)?.to_dtype(x.dtype())?;
    let (h, w) = (x.dim(2)?, x.dim(3)?);
    let padded = Tensor::cat(&[&x.narrow(2, 0, 1)?, x, &x.narrow(2, h - 1, 1)?], 2)?;
    let padded = Tensor::cat(&[&padded.narrow(3, 0, 1)?, &padded, &padded.narrow(3, w - 1, 1)?], 3)?;
    Ok(padded.conv2d(&kernel, 0, 1, 1, c)?)
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        Self {
            iters: 1500,
            batch_size: 8,
            optimizer: OptimizerConfig { beta1: 0.9, ..OptimizerConfig::adam(2e-3) },
            loss: LossWeights::default(),
            min_overlap: 0.7,
            flip: true,
            augment: PhotometricAugment::default(),
        }
    }
}

pub struct Detector {
    config: DetectorConfig,
    backbone: ParamStore,
    head: LabelHead,
}

fn he_init(rng: &mut FactoryRng, out: usize, inp: usize, k: usize) -> Vec<f64> {
    let std = (2.0 / (inp * k * k) as f64).sqrt();
    rng::normal_vec(rng, out * inp * k * k).into_iter().map(|v| v * std).collect()
}

const STAGES: [&str; 4] = ["c1", "c2", "c3", "fuse"];

impl Detector {
    pub fn new(config: DetectorConfig, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::rng_from_seed(rng::derive_seed(seed, "detector-init"));
        let [a, b, c] = config.channels;
        let shapes = [(a, 3), (b, a), (c, b), (config.fuse_channels, b + c)];
        let mut backbone = ParamStore::new(dtype);
        for (name, (out, inp)) in STAGES.iter().zip(shapes) {
            backbone.add(&format!("backbone.{name}.weight"), 1, &[out, inp, 3, 3], he_init(&mut r, out, inp, 3))?;
            backbone.add(&format!("backbone.{name}.bias"), 1, &[out], vec![0.0; out])?;
        }
        backbone.set_trainable([1].into());
        let head = LabelHead::new(config.fuse_channels, config.head_hidden, config.num_classes, dtype, rng::derive_seed(seed, "detector-head"))?;
        Ok(Self { config, backbone, head })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn dtype(&self) -> DType {
        self.backbone.dtype()
    }

    fn conv(&self, name: &str, x: &Tensor, tracking: Tracking) -> Result<Tensor> {
        let w = self.backbone.get(&format!("backbone.{name}.weight"), tracking)?;
        let b = self.backbone.get(&format!("backbone.{name}.bias"), tracking)?;
        Ok(conv2d_same(x, &w, &b)?.relu()?)
    }

    pub fn features(&self, images: &Tensor, tracking: Tracking) -> Result<Tensor> {
        let (_, c, h, w) = images.dims4()?;
        let s = self.config.image_side;
        if c != 3 || h != s || w != s {
            return Err(FactoryError::argument(format!("detector expects [N, 3, {s}, {s}] images, got {:?}", images.dims())));
        }
        let x = images.to_dtype(self.dtype())?;
        let f1 = self.conv("c1", &x, tracking)?.max_pool2d(2)?;
        let f2 = self.conv("c2", &f1, tracking)?;
        let f3 = self.conv("c3", &f2.max_pool2d(2)?, tracking)?.upsample_nearest2d(s / 2, s / 2)?;
        self.conv("fuse", &Tensor::cat(&[f2, f3], 1)?, tracking)
    }

    pub fn forward(&self, images: &Tensor, tracking: Tracking) -> Result<PredictionTensors> {
        self.head.forward(&self.features(images, tracking)?, tracking)
    }

    pub fn detect(&self, images: &Tensor, decode_cfg: &DecodeConfig) -> Result<Vec<Vec<Detection>>> {
        let n = images.dim(0)?;
        let mut out = Vec::with_capacity(n);
        for start in (0..n).step_by(64) {
            let chunk = images.narrow(0, start, 64.min(n - start))?;
            let pred = self.forward(&chunk, Tracking::Off)?;
            out.extend(pred.to_triplets()?.iter().map(|p| decode(p, DETECTOR_STRIDE, decode_cfg)));
        }
        Ok(out)
    }

    pub fn evaluate(&self, images: &Tensor, labels: &[LabelSet], decode_cfg: &DecodeConfig, iou_thresh: f64) -> Result<MatchResult> {
        average_precision(&self.detect(images, decode_cfg)?, labels, iou_thresh)
    }

    pub fn trainable_vars(&self) -> Vec<candle_core::Var> {
        let mut v = self.backbone.trainable_vars();
        v.extend(self.head.trainable_vars());
        v
    }

    /// Independent copy of all weights.
    pub fn deep_copy(&self) -> Result<Self> {
        let copy = Self::new(self.config.clone(), self.dtype(), 0)?;
        copy.load_tensors(&self.to_checkpoint()?)?;
        Ok(copy)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut tensors = self.backbone.to_named_tensors()?;
        tensors.extend(self.head.to_named_tensors()?);
        Ok(Checkpoint {
            header: serde_json::json!({
                "kind": "detector",
                "image_side": self.config.image_side,
                "num_classes": self.config.num_classes,
                "channels": self.config.channels,
                "fuse_channels": self.config.fuse_channels,
                "head_hidden": self.config.head_hidden,
            }),
            tensors,
        })
    }

    fn load_tensors(&self, ck: &Checkpoint) -> Result<()> {
        self.backbone.load_named(&ck.tensors)?;
        self.head.load_named(&ck.tensors)
    }

    pub fn from_checkpoint(ck: &Checkpoint, dtype: DType) -> Result<Self> {
        let h = &ck.header;
        if h.get("kind").and_then(|k| k.as_str()) != Some("detector") {
            return Err(FactoryError::config("checkpoint is not a detector"));
        }
        let config = DetectorConfig {
            image_side: header_usize(h, "image_side")?,
            num_classes: header_usize(h, "num_classes")?,
            channels: serde_json::from_value(h["channels"].clone())?,
            fuse_channels: header_usize(h, "fuse_channels")?,
            head_hidden: header_usize(h, "head_hidden")?,
        };
        let d = Self::new(config, dtype, 0)?;
        d.load_tensors(ck)?;
        Ok(d)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path, dtype: DType) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, dtype)
    }
}

pub fn flip_labels(labels: &[BoxLabel], width: f64) -> LabelSet {
    labels
        .iter()
        .map(|b| BoxLabel {
            x_min: width - b.x_max,
            x_max: width - b.x_min,
            ..*b
        })
        .collect()
}

fn flip_images(images: &Tensor) -> Result<Tensor> {
    let w = images.dim(3)?;
    let idx = Tensor::from_vec((0..w as u32).rev().collect::<Vec<_>>(), w, &Device::Cpu)?;
    Ok(images.index_select(&idx, 3)?)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectorTrainTrace {
    pub losses: Vec<f64>,
    pub seconds: f64,
}

/// Trains backbone and head together on `[N, 3, S, S]` images with box labels.
pub fn train_detector(det: &Detector, images: &Tensor, labels: &[LabelSet], cfg: &DetectorTrainConfig, seed: u64) -> Result<DetectorTrainTrace> {
    let start = std::time::Instant::now();
    let n = images.dim(0)?;
    if n == 0 || n != labels.len() {
        return Err(FactoryError::argument(format!("{n} training images for {} label sets", labels.len())));
    }
    let s = det.config.image_side;
    let k = det.config.num_classes;
    let mut all_labels: Vec<LabelSet> = labels.to_vec();
    let mut all_images = images.to_dtype(det.dtype())?;
    if cfg.flip {
        all_labels.extend(labels.iter().map(|l| flip_labels(l, s as f64)));
        all_images = Tensor::cat(&[&all_images, &flip_images(&all_images)?], 0)?;
    }
    let triplets = all_labels
        .iter()
        .map(|l| splat_targets(l, s, s, DETECTOR_STRIDE, k, cfg.min_overlap))
        .collect::<Result<Vec<_>>>()?;
    let targets = TargetTensors::from_triplets(&triplets, det.dtype())?;

    let mut r = rng::rng_from_seed(rng::derive_seed(seed, "detector-train"));
    let mut opt = cfg.optimizer.build(det.trainable_vars())?;
    let batch = cfg.batch_size.clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut trace = DetectorTrainTrace::default();
    for it in 0..cfg.iters {
        let mut idx = Vec::with_capacity(batch);
        while idx.len() < batch {
            if cursor == n {
                order.shuffle(&mut r);
                cursor = 0;
            }
            let i = order[cursor];
            cursor += 1;
            let flipped = cfg.flip && rand::Rng::random_bool(&mut r, 0.5);
            idx.push(if flipped { i + n } else { i });
        }
        let ids = Tensor::from_vec(idx.iter().map(|&i| i as u32).collect::<Vec<_>>(), idx.len(), &Device::Cpu)?;
        let x = cfg.augment.apply(&all_images.index_select(&ids, 0)?, &mut r)?;
        let pred = det.forward(&x, Tracking::On)?;
        let (loss, parts) = detection_loss(&pred, &targets.select(&idx)?, &cfg.loss)?;
        ensure_finite("detector loss", parts.total)?;
        opt.step(&loss.backward()?)?;
        if it % 250 == 0 || it + 1 == cfg.iters {
            debug!("detector it {it}: {:.4} (k {:.4} off {:.4} size {:.4})", parts.total, parts.keypoint, parts.offset, parts.size);
        }
        trace.losses.push(parts.total);
    }
    trace.seconds = start.elapsed().as_secs_f64();
    info!(
        "detector: {n} images, {} iters, loss {:.4} -> {:.4} in {:.1}s",
        cfg.iters,
        trace.losses.first().copied().unwrap_or(f64::NAN),
        trace.losses.last().copied().unwrap_or(f64::NAN),
        trace.seconds
    );
    Ok(trace)
}
