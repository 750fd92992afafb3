//! Keypoint-style detection labels: box encoding onto a strided heatmap,
//! the focal/offset/size losses, peak decoding, and the label head that reads
//! generator features.

use std::collections::BTreeSet;

use candle_core::{DType, Device, Tensor};
use log::{debug, info};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{ensure_finite, FactoryError, Result};
use crate::generator::{header_usize, Generator, LatentCode};
use crate::ops::{self, conv2d_same};
use crate::optim::OptimizerConfig;
use crate::params::{ParamStore, Tracking};
use crate::rng::{self, FactoryRng};

pub const PROB_EPS: f64 = 1e-4;
/// `-ln((1 - 0.1) / 0.1)`: the heatmap starts near 0.1 everywhere.
pub const HEATMAP_BIAS_INIT: f64 = -2.19;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxLabel {
    pub class_id: usize,
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

pub type LabelSet = Vec<BoxLabel>;

impl BoxLabel {
    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    pub fn validate(&self, width: usize, height: usize, num_classes: usize) -> Result<()> {
        let ok = self.x_min.is_finite()
            && self.y_min.is_finite()
            && self.x_max.is_finite()
            && self.y_max.is_finite()
            && 0.0 <= self.x_min
            && self.x_min < self.x_max
            && self.x_max <= width as f64
            && 0.0 <= self.y_min
            && self.y_min < self.y_max
            && self.y_max <= height as f64;
        if !ok {
            return Err(FactoryError::argument(format!("box {self:?} outside a {width}x{height} image")));
        }
        if self.class_id >= num_classes {
            return Err(FactoryError::argument(format!("class id {} outside 0..{num_classes}", self.class_id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub label: BoxLabel,
    pub score: f64,
}

/// Encoded training targets on a `grid_w × grid_h` heatmap. Arrays are
/// channel-major: `heatmap[(c * grid_h + y) * grid_w + x]`, offsets and sizes
/// store x in channel 0 and y in channel 1.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetTriplet {
    pub grid_w: usize,
    pub grid_h: usize,
    pub num_classes: usize,
    pub heatmap: Vec<f64>,
    pub offsets: Vec<f64>,
    pub sizes: Vec<f64>,
    pub mask: Vec<bool>,
}

/// Head outputs for one image, same layout as [`TargetTriplet`]; `heatmap` holds probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTriplet {
    pub grid_w: usize,
    pub grid_h: usize,
    pub num_classes: usize,
    pub heatmap: Vec<f64>,
    pub offsets: Vec<f64>,
    pub sizes: Vec<f64>,
}

impl TargetTriplet {
    /// The ideal prediction for these targets.
    pub fn as_prediction(&self) -> PredictionTriplet {
        PredictionTriplet {
            grid_w: self.grid_w,
            grid_h: self.grid_h,
            num_classes: self.num_classes,
            heatmap: self.heatmap.clone(),
            offsets: self.offsets.clone(),
            sizes: self.sizes.clone(),
        }
    }
}

/// Largest center shift (in the units of `box_w`, `box_h`) that keeps IoU with
/// the true box at least `min_overlap`, taking the worst of the three corner cases.
pub fn gaussian_radius(box_w: f64, box_h: f64, min_overlap: f64) -> f64 {
    let (w, h, o) = (box_w, box_h, min_overlap);
    // one corner moves in, the other out
    let b1 = w + h;
    let c1 = w * h * (1.0 - o) / (1.0 + o);
    let r1 = (b1 - (b1 * b1 - 4.0 * c1).max(0.0).sqrt()) / 2.0;
    // both corners move in
    let b2 = 2.0 * (w + h);
    let c2 = (1.0 - o) * w * h;
    let r2 = (b2 - (b2 * b2 - 16.0 * c2).max(0.0).sqrt()) / 8.0;
    // both corners move out
    let a3 = 4.0 * o;
    let b3 = -2.0 * o * (w + h);
    let c3 = (o - 1.0) * w * h;
    let r3 = (-b3 + (b3 * b3 - 4.0 * a3 * c3).max(0.0).sqrt()) / (2.0 * a3);
    r1.min(r2).min(r3).max(0.0)
}

pub fn gaussian_sigma(radius: f64) -> f64 {
    radius.max(1.0) / 3.0
}

/// Encodes boxes onto a `(W/r) × (H/r)` grid per class.
pub fn splat_targets(boxes: &[BoxLabel], width: usize, height: usize, stride: usize, num_classes: usize, min_overlap: f64) -> Result<TargetTriplet> {
    if stride == 0 || width % stride != 0 || height % stride != 0 {
        return Err(FactoryError::argument(format!("image {width}x{height} not divisible by stride {stride}")));
    }
    let (gw, gh) = (width / stride, height / stride);
    let cells = gw * gh;
    let mut t = TargetTriplet {
        grid_w: gw,
        grid_h: gh,
        num_classes,
        heatmap: vec![0.0; num_classes * cells],
        offsets: vec![0.0; 2 * cells],
        sizes: vec![0.0; 2 * cells],
        mask: vec![false; cells],
    };
    let r = stride as f64;
    let mut owner_area = vec![0.0f64; cells];
    for b in boxes {
        b.validate(width, height, num_classes)?;
        let (cx, cy) = b.center();
        let (px, py) = (cx / r, cy / r);
        let (kx, ky) = ((px.floor() as usize).min(gw - 1), (py.floor() as usize).min(gh - 1));
        let (bw, bh) = (b.width() / r, b.height() / r);
        let sigma = gaussian_sigma(gaussian_radius(bw, bh, min_overlap));
        let denom = 2.0 * sigma * sigma;
        let plane = &mut t.heatmap[b.class_id * cells..(b.class_id + 1) * cells];
        for y in 0..gh {
            let dy = y as f64 - ky as f64;
            for x in 0..gw {
                let dx = x as f64 - kx as f64;
                let v = (-(dx * dx + dy * dy) / denom).exp();
                let cell = &mut plane[y * gw + x];
                if v > *cell {
                    *cell = v;
                }
            }
        }
        let idx = ky * gw + kx;
        if t.mask[idx] {
            if b.area() <= owner_area[idx] {
                debug!("keypoint collision at cell ({kx}, {ky}); keeping the larger box");
                continue;
            }
            debug!("keypoint collision at cell ({kx}, {ky}); replacing with the larger box");
        }
        t.mask[idx] = true;
        owner_area[idx] = b.area();
        t.offsets[idx] = px - kx as f64;
        t.offsets[cells + idx] = py - ky as f64;
        t.sizes[idx] = bw;
        t.sizes[cells + idx] = bh;
    }
    Ok(t)
}

/// Batched targets as tensors: heatmap `[B, C, h, w]`, offsets/sizes `[B, 2, h, w]`, mask `[B, 1, h, w]`.
#[derive(Debug, Clone)]
pub struct TargetTensors {
    pub heatmap: Tensor,
    pub offsets: Tensor,
    pub sizes: Tensor,
    pub mask: Tensor,
}

impl TargetTensors {
    pub fn from_triplets(targets: &[TargetTriplet], dtype: DType) -> Result<Self> {
        let first = targets.first().ok_or_else(|| FactoryError::argument("no targets"))?;
        let (c, h, w) = (first.num_classes, first.grid_h, first.grid_w);
        let b = targets.len();
        let mut hm = Vec::with_capacity(b * c * h * w);
        let mut off = Vec::with_capacity(b * 2 * h * w);
        let mut size = Vec::with_capacity(b * 2 * h * w);
        let mut mask = Vec::with_capacity(b * h * w);
        for t in targets {
            if (t.num_classes, t.grid_h, t.grid_w) != (c, h, w) {
                return Err(FactoryError::argument("targets with mixed shapes"));
            }
            hm.extend_from_slice(&t.heatmap);
            off.extend_from_slice(&t.offsets);
            size.extend_from_slice(&t.sizes);
            mask.extend(t.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }));
        }
        Ok(Self {
            heatmap: ops::from_f64(hm, &[b, c, h, w], dtype)?,
            offsets: ops::from_f64(off, &[b, 2, h, w], dtype)?,
            sizes: ops::from_f64(size, &[b, 2, h, w], dtype)?,
            mask: ops::from_f64(mask, &[b, 1, h, w], dtype)?,
        })
    }

    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        let ids = Tensor::from_vec(idx.iter().map(|&i| i as u32).collect::<Vec<_>>(), idx.len(), &Device::Cpu)?;
        Ok(Self {
            heatmap: self.heatmap.index_select(&ids, 0)?,
            offsets: self.offsets.index_select(&ids, 0)?,
            sizes: self.sizes.index_select(&ids, 0)?,
            mask: self.mask.index_select(&ids, 0)?,
        })
    }
}

/// Head outputs: heatmap probabilities `[B, C, h, w]` (clamped away from 0 and 1), offsets and sizes `[B, 2, h, w]`.
#[derive(Debug, Clone)]
pub struct PredictionTensors {
    pub heatmap: Tensor,
    pub offsets: Tensor,
    pub sizes: Tensor,
}

impl PredictionTensors {
    pub fn to_triplets(&self) -> Result<Vec<PredictionTriplet>> {
        let (b, c, h, w) = self.heatmap.dims4()?;
        let hm = ops::to_f64_vec(&self.heatmap)?;
        let off = ops::to_f64_vec(&self.offsets)?;
        let size = ops::to_f64_vec(&self.sizes)?;
        let (nc, n2) = (c * h * w, 2 * h * w);
        Ok((0..b)
            .map(|i| PredictionTriplet {
                grid_w: w,
                grid_h: h,
                num_classes: c,
                heatmap: hm[i * nc..(i + 1) * nc].to_vec(),
                offsets: off[i * n2..(i + 1) * n2].to_vec(),
                sizes: size[i * n2..(i + 1) * n2].to_vec(),
            })
            .collect())
    }
}

/// Penalty-reduced pixelwise focal loss on heatmap probabilities. Cells with
/// target exactly 1 are positives; the sum is divided by their count (at least 1).
pub fn keypoint_focal_loss(pred: &Tensor, target: &Tensor, alpha: f64, beta: f64) -> Result<Tensor> {
    if pred.dims() != target.dims() {
        return Err(FactoryError::argument(format!("heatmap shape {:?} vs target {:?}", pred.dims(), target.dims())));
    }
    let dtype = pred.dtype();
    let target = target.to_dtype(dtype)?;
    let pos = target.ge(1.0)?.to_dtype(dtype)?;
    let neg = (pos.neg()? + 1.0)?;
    let one_minus_pred = (pred.neg()? + 1.0)?;
    let pos_term = one_minus_pred.powf(alpha)?.mul(&pred.log()?)?.mul(&pos)?;
    let neg_weight = (target.neg()? + 1.0)?.relu()?.powf(beta)?;
    let neg_term = neg_weight.mul(&pred.powf(alpha)?)?.mul(&one_minus_pred.log()?)?.mul(&neg)?;
    let n = ops::scalar(&pos.sum_all()?)?.max(1.0);
    Ok(((pos_term + neg_term)?.sum_all()? * (-1.0 / n))?)
}

/// Masked L1 losses for offsets and sizes, summed over both coordinates and
/// divided by the number of keypoints. Both are 0 when the mask is empty.
pub fn offset_and_size_losses(pred: &PredictionTensors, target: &TargetTensors) -> Result<(Tensor, Tensor)> {
    let n = ops::scalar(&target.mask.sum_all()?)?;
    let dtype = pred.offsets.dtype();
    if n == 0.0 {
        let zero = (pred.offsets.sum_all()? * 0.0)?;
        return Ok((zero.clone(), zero));
    }
    let mask = target.mask.to_dtype(dtype)?;
    let l1 = |p: &Tensor, t: &Tensor| -> Result<Tensor> { Ok(((p - t.to_dtype(dtype)?)?.abs()?.broadcast_mul(&mask)?.sum_all()? / n)?) };
    Ok((l1(&pred.offsets, &target.offsets)?, l1(&pred.sizes, &target.sizes)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionLossParts {
    pub keypoint: f64,
    pub offset: f64,
    pub size: f64,
    pub total: f64,
}

/// `L_k + λ_off·L_off + λ_size·L_size` plus the component values.
pub fn detection_loss(pred: &PredictionTensors, target: &TargetTensors, cfg: &LossWeights) -> Result<(Tensor, DetectionLossParts)> {
    let lk = keypoint_focal_loss(&pred.heatmap, &target.heatmap, cfg.alpha, cfg.beta)?;
    let (loff, lsize) = offset_and_size_losses(pred, target)?;
    let keypoint = ensure_finite("keypoint", ops::scalar(&lk)?)?;
    let offset = ensure_finite("offset", ops::scalar(&loff)?)?;
    let size = ensure_finite("size", ops::scalar(&lsize)?)?;
    let total = combine_detection_loss(keypoint, offset, size, cfg.lambda_off, cfg.lambda_size)?;
    let loss = ((lk + (loff * cfg.lambda_off)?)? + (lsize * cfg.lambda_size)?)?;
    Ok((loss, DetectionLossParts { keypoint, offset, size, total }))
}

pub fn combine_detection_loss(keypoint: f64, offset: f64, size: f64, lambda_off: f64, lambda_size: f64) -> Result<f64> {
    ensure_finite("keypoint", keypoint)?;
    ensure_finite("offset", offset)?;
    ensure_finite("size", size)?;
    Ok(keypoint + lambda_off * offset + lambda_size * size)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub lambda_off: f64,
    pub lambda_size: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: 4.0,
            lambda_off: 1.0,
            lambda_size: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub score_thresh: f64,
    pub max_dets: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { score_thresh: 0.6, max_dets: 32 }
    }
}

/// Peak extraction: per-class 3×3 local maxima (ties count) above the
/// threshold, best `max_dets` by score, boxes clamped to the image.
pub fn decode(pred: &PredictionTriplet, stride: usize, cfg: &DecodeConfig) -> Vec<Detection> {
    let (gw, gh) = (pred.grid_w, pred.grid_h);
    let cells = gw * gh;
    let r = stride as f64;
    let (img_w, img_h) = ((gw * stride) as f64, (gh * stride) as f64);
    let mut found: Vec<(f64, usize, usize, usize)> = Vec::new();
    for c in 0..pred.num_classes {
        let plane = &pred.heatmap[c * cells..(c + 1) * cells];
        for y in 0..gh {
            for x in 0..gw {
                let v = plane[y * gw + x];
                if !(v > cfg.score_thresh) {
                    continue;
                }
                let mut peak = true;
                'nb: for ny in y.saturating_sub(1)..=(y + 1).min(gh - 1) {
                    for nx in x.saturating_sub(1)..=(x + 1).min(gw - 1) {
                        if plane[ny * gw + nx] > v {
                            peak = false;
                            break 'nb;
                        }
                    }
                }
                if peak {
                    found.push((v, c, y, x));
                }
            }
        }
    }
    found.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2, a.3).cmp(&(b.1, b.2, b.3))));
    found.truncate(cfg.max_dets);
    found
        .into_iter()
        .filter_map(|(score, c, y, x)| {
            let idx = y * gw + x;
            let cx = (x as f64 + pred.offsets[idx]) * r;
            let cy = (y as f64 + pred.offsets[cells + idx]) * r;
            let (w, h) = (pred.sizes[idx].abs() * r, pred.sizes[cells + idx].abs() * r);
            let label = BoxLabel {
                class_id: c,
                x_min: (cx - w / 2.0).clamp(0.0, img_w),
                y_min: (cy - h / 2.0).clamp(0.0, img_h),
                x_max: (cx + w / 2.0).clamp(0.0, img_w),
                y_max: (cy + h / 2.0).clamp(0.0, img_h),
            };
            (label.x_max > label.x_min && label.y_max > label.y_min).then_some(Detection { label, score })
        })
        .collect()
}

/// Three parallel heads (heatmap, offset, size), each `3×3 conv → ReLU → 1×1 conv`
/// over the same input features.
pub struct LabelHead {
    store: ParamStore,
    in_channels: usize,
    hidden: usize,
    num_classes: usize,
}

const HEADS: [&str; 3] = ["heatmap", "offset", "size"];

impl LabelHead {
    pub fn new(in_channels: usize, hidden: usize, num_classes: usize, dtype: DType, seed: u64) -> Result<Self> {
        if in_channels == 0 || hidden == 0 || num_classes == 0 {
            return Err(FactoryError::config("label head dimensions must be positive"));
        }
        let mut rng = rng::rng_from_seed(rng::derive_seed(seed, "label-head-init"));
        let mut store = ParamStore::new(dtype);
        for head in HEADS {
            let out = if head == "heatmap" { num_classes } else { 2 };
            let std0 = (2.0 / (in_channels * 9) as f64).sqrt();
            store.add(&format!("{head}.conv.weight"), 1, &[hidden, in_channels, 3, 3], scaled(rng::normal_vec(&mut rng, hidden * in_channels * 9), std0))?;
            store.add(&format!("{head}.conv.bias"), 1, &[hidden], vec![0.0; hidden])?;
            let std1 = (1.0 / hidden as f64).sqrt();
            store.add(&format!("{head}.out.weight"), 2, &[out, hidden, 1, 1], scaled(rng::normal_vec(&mut rng, out * hidden), std1))?;
            let bias = if head == "heatmap" { HEATMAP_BIAS_INIT } else { 0.0 };
            store.add(&format!("{head}.out.bias"), 2, &[out], vec![bias; out])?;
        }
        store.set_trainable([1, 2].into());
        Ok(Self {
            store,
            in_channels,
            hidden,
            num_classes,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn trainable_vars(&self) -> Vec<candle_core::Var> {
        self.store.trainable_vars()
    }

    fn branch(&self, head: &str, x: &Tensor, tracking: Tracking) -> Result<Tensor> {
        let s = &self.store;
        let h = conv2d_same(x, &s.get(&format!("{head}.conv.weight"), tracking)?, &s.get(&format!("{head}.conv.bias"), tracking)?)?.relu()?;
        conv2d_same(&h, &s.get(&format!("{head}.out.weight"), tracking)?, &s.get(&format!("{head}.out.bias"), tracking)?)
    }

    pub fn forward(&self, features: &Tensor, tracking: Tracking) -> Result<PredictionTensors> {
        let c = features.dim(1)?;
        if c != self.in_channels {
            return Err(FactoryError::argument(format!("label head expects {} channels, got {c}", self.in_channels)));
        }
        let x = features.to_dtype(self.store.dtype())?;
        let logits = self.branch("heatmap", &x, tracking)?;
        let heatmap = ops::sigmoid(&logits)?.clamp(PROB_EPS, 1.0 - PROB_EPS)?;
        Ok(PredictionTensors {
            heatmap,
            offsets: self.branch("offset", &x, tracking)?,
            sizes: self.branch("size", &x, tracking)?,
        })
    }

    pub fn to_named_tensors(&self) -> Result<Vec<crate::checkpoint::NamedTensor>> {
        self.store.to_named_tensors()
    }

    pub fn load_named(&self, tensors: &[crate::checkpoint::NamedTensor]) -> Result<()> {
        self.store.load_named(tensors)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            header: serde_json::json!({
                "kind": "label_head",
                "in_channels": self.in_channels,
                "hidden": self.hidden,
                "num_classes": self.num_classes,
            }),
            tensors: self.to_named_tensors()?,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint, dtype: DType) -> Result<Self> {
        let h = &ck.header;
        if h.get("kind").and_then(|k| k.as_str()) != Some("label_head") {
            return Err(FactoryError::config("checkpoint is not a label head"));
        }
        let head = Self::new(header_usize(h, "in_channels")?, header_usize(h, "hidden")?, header_usize(h, "num_classes")?, dtype, 0)?;
        head.load_named(&ck.tensors)?;
        Ok(head)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &std::path::Path, dtype: DType) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, dtype)
    }
}

fn scaled(mut v: Vec<f64>, s: f64) -> Vec<f64> {
    v.iter_mut().for_each(|x| *x *= s);
    v
}

/// Backbone features for the label head: the captured generator layers,
/// bilinearly resized to `side × side` and concatenated along channels.
pub fn extract_features(g: &Generator, latents: &[LatentCode], psi: f64, layers: &BTreeSet<usize>, side: usize) -> Result<Tensor> {
    if layers.is_empty() || layers.iter().any(|&m| m == 0 || m > g.num_layers()) {
        return Err(FactoryError::config(format!("label capture layers {layers:?} outside 1..={}", g.num_layers())));
    }
    let out = g.generate(latents, psi, layers, Tracking::Off)?;
    features_from_maps(&out.features.values().cloned().collect::<Vec<_>>(), side)
}

pub fn features_from_maps(maps: &[Tensor], side: usize) -> Result<Tensor> {
    let resized = maps.iter().map(|f| ops::resize_bilinear(f, side, side)).collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&resized, 1)?)
}

pub fn feature_channels(g: &Generator, layers: &BTreeSet<usize>) -> usize {
    layers.iter().map(|&m| g.config().channels[m - 1]).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelConfig {
    pub iters: usize,
    pub batch_size: usize,
    pub hidden: usize,
    /// Heatmap side length; defaults to half the generator output side.
    pub heatmap_side: Option<usize>,
    /// Generator layers feeding the head; defaults to `1..L-1`.
    pub capture_layers: Option<BTreeSet<usize>>,
    pub optimizer: OptimizerConfig,
    pub loss: LossWeights,
    pub decode: DecodeConfig,
    pub min_overlap: f64,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            iters: 1000,
            batch_size: 4,
            hidden: 16,
            heatmap_side: None,
            capture_layers: None,
            optimizer: OptimizerConfig::sgd(1e-4, 1e-4),
            loss: LossWeights::default(),
            decode: DecodeConfig::default(),
            min_overlap: 0.7,
        }
    }
}

impl LabelConfig {
    pub fn heatmap_side_for(&self, image_side: usize) -> usize {
        self.heatmap_side.unwrap_or((image_side / 2).max(1))
    }

    pub fn stride_for(&self, image_side: usize) -> Result<usize> {
        let side = self.heatmap_side_for(image_side);
        if side == 0 || image_side % side != 0 {
            return Err(FactoryError::config(format!("label.heatmap_side {side} must divide the image side {image_side}")));
        }
        Ok(image_side / side)
    }

    pub fn layers_for(&self, num_layers: usize) -> BTreeSet<usize> {
        self.capture_layers.clone().unwrap_or_else(|| (1..num_layers.max(2)).collect())
    }
}

/// Generic keypoint-head trainer over precomputed `[N, C, h, w]` inputs.
pub fn train_head_on_features(
    head: &LabelHead,
    features: &Tensor,
    targets: &TargetTensors,
    iters: usize,
    batch_size: usize,
    optimizer: &OptimizerConfig,
    loss: &LossWeights,
    rng: &mut FactoryRng,
) -> Result<Vec<f64>> {
    let n = features.dim(0)?;
    if n == 0 {
        return Err(FactoryError::argument("no training samples"));
    }
    let mut opt = optimizer.build(head.trainable_vars())?;
    let batch = batch_size.clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut trace = Vec::with_capacity(iters);
    for it in 0..iters {
        let mut idx = Vec::with_capacity(batch);
        while idx.len() < batch {
            if cursor == n {
                order.shuffle(rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let ids = Tensor::from_vec(idx.iter().map(|&i| i as u32).collect::<Vec<_>>(), idx.len(), &Device::Cpu)?;
        let x = features.index_select(&ids, 0)?;
        let t = targets.select(&idx)?;
        let pred = head.forward(&x, Tracking::On)?;
        let (l, parts) = detection_loss(&pred, &t, loss)?;
        opt.step(&l.backward()?)?;
        if it % 100 == 0 || it + 1 == iters {
            debug!("head it {it}: {:.4} (k {:.4} off {:.4} size {:.4})", parts.total, parts.keypoint, parts.offset, parts.size);
        }
        trace.push(parts.total);
    }
    Ok(trace)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelTrainTrace {
    pub losses: Vec<f64>,
}

/// Trains a fresh label head on generator features of the annotated latents.
/// The generator is only read.
pub fn train_label_head(g: &Generator, annotated: &[(LatentCode, LabelSet)], num_classes: usize, psi: f64, cfg: &LabelConfig, seed: u64) -> Result<(LabelHead, LabelTrainTrace)> {
    if annotated.is_empty() {
        return Err(FactoryError::argument("label head training needs at least one annotated sample"));
    }
    let image_side = g.output_side();
    let stride = cfg.stride_for(image_side)?;
    let side = cfg.heatmap_side_for(image_side);
    let layers = cfg.layers_for(g.num_layers());
    let mut targets = Vec::with_capacity(annotated.len());
    for (_, labels) in annotated {
        for b in labels {
            if b.class_id >= num_classes {
                return Err(FactoryError::argument(format!("annotation class {} outside 0..{num_classes}", b.class_id)));
            }
        }
        targets.push(splat_targets(labels, image_side, image_side, stride, num_classes, cfg.min_overlap)?);
    }
    let latents: Vec<LatentCode> = annotated.iter().map(|(z, _)| z.clone()).collect();
    let features = extract_features(g, &latents, psi, &layers, side)?.detach();
    let head = LabelHead::new(features.dim(1)?, cfg.hidden, num_classes, g.dtype(), seed)?;
    let targets = TargetTensors::from_triplets(&targets, g.dtype())?;
    let mut rng = rng::rng_from_seed(rng::derive_seed(seed, "label-train"));
    let losses = train_head_on_features(&head, &features, &targets, cfg.iters, cfg.batch_size, &cfg.optimizer, &cfg.loss, &mut rng)?;
    info!(
        "label head: {} samples, {} iters, loss {:.4} -> {:.4}",
        annotated.len(),
        cfg.iters,
        losses.first().copied().unwrap_or(f64::NAN),
        losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok((head, LabelTrainTrace { losses }))
}

/// Generator features → heads → decode, for a batch of latents.
pub fn predict_labels(g: &Generator, head: &LabelHead, latents: &[LatentCode], psi: f64, cfg: &LabelConfig) -> Result<Vec<Vec<Detection>>> {
    if latents.is_empty() {
        return Ok(vec![]);
    }
    let image_side = g.output_side();
    let stride = cfg.stride_for(image_side)?;
    let features = extract_features(g, latents, psi, &cfg.layers_for(g.num_layers()), cfg.heatmap_side_for(image_side))?;
    let pred = head.forward(&features, Tracking::Off)?;
    Ok(pred.to_triplets()?.iter().map(|p| decode(p, stride, &cfg.decode)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::GeneratorConfig;
    use candle_core::Var;
    use proptest::prelude::*;

    fn bx(c: usize, x0: f64, y0: f64, x1: f64, y1: f64) -> BoxLabel {
        BoxLabel { class_id: c, x_min: x0, y_min: y0, x_max: x1, y_max: y1 }
    }

    /// Largest r with `cond(r)` true, by bisection on [0, hi].
    fn bisect(cond: impl Fn(f64) -> bool, hi: f64) -> f64 {
        let (mut lo, mut hi) = (0.0, hi);
        for _ in 0..200 {
            let mid = (lo + hi) / 2.0;
            if cond(mid) {
                lo = mid
            } else {
                hi = mid
            }
        }
        lo
    }

    fn radius_oracle(w: f64, h: f64, o: f64) -> f64 {
        let one_in_one_out = |r: f64| {
            let inter = (w - r) * (h - r);
            inter / (2.0 * w * h - inter) >= o
        };
        let both_in = |r: f64| (w - 2.0 * r) * (h - 2.0 * r) / (w * h) >= o;
        let both_out = |r: f64| w * h / ((w + 2.0 * r) * (h + 2.0 * r)) >= o;
        let m = w.min(h);
        bisect(one_in_one_out, m).min(bisect(both_in, m / 2.0)).min(bisect(both_out, 10.0 * (w + h)))
    }

    #[test]
    fn radius_matches_bisection_oracle() {
        let r = gaussian_radius(10.0, 10.0, 0.7);
        assert!((r - radius_oracle(10.0, 10.0, 0.7)).abs() < 1e-9, "{r}");
        for (w, h) in [(3.0, 7.0), (12.5, 4.0), (1.0, 1.0), (30.0, 30.0)] {
            assert!((gaussian_radius(w, h, 0.7) - radius_oracle(w, h, 0.7)).abs() < 1e-9);
        }
        assert!(gaussian_radius(10.0, 10.0, 0.999999) < 1e-4);
    }

    #[test]
    fn radius_is_monotone_in_size() {
        let mut prev = 0.0;
        for i in 1..=100 {
            let s = i as f64 * 0.5;
            let r = gaussian_radius(s, 0.6 * s, 0.7);
            let oracle = radius_oracle(s, 0.6 * s, 0.7);
            assert!((r - oracle).abs() < 1e-9);
            assert!(r >= prev);
            prev = r;
        }
    }

    #[test]
    fn centered_box_has_half_offsets() {
        let t = splat_targets(&[bx(0, 4.0, 4.0, 8.0, 8.0)], 16, 16, 4, 1, 0.7).unwrap();
        // center (6, 6) = 4*1 + 2
        let idx = 4 + 1;
        assert!(t.mask[idx]);
        assert_eq!(t.heatmap[idx], 1.0);
        assert_eq!((t.offsets[idx], t.offsets[16 + idx]), (0.5, 0.5));
        assert_eq!((t.sizes[idx], t.sizes[16 + idx]), (1.0, 1.0));
        assert_eq!(t.mask.iter().filter(|&&m| m).count(), 1);
    }

    fn splat_oracle(boxes: &[BoxLabel], gw: usize, gh: usize, r: f64, c: usize) -> Vec<f64> {
        let mut y = vec![0.0; c * gw * gh];
        for b in boxes {
            let (cx, cy) = b.center();
            let (kx, ky) = ((cx / r).floor(), (cy / r).floor());
            let rad = gaussian_radius(b.width() / r, b.height() / r, 0.7);
            let sigma = rad.max(1.0) / 3.0;
            for yy in 0..gh {
                for xx in 0..gw {
                    let d2 = (xx as f64 - kx).powi(2) + (yy as f64 - ky).powi(2);
                    let v = (-d2 / (2.0 * sigma * sigma)).exp();
                    let i = b.class_id * gw * gh + yy * gw + xx;
                    y[i] = f64::max(y[i], v);
                }
            }
        }
        y
    }

    #[test]
    fn overlapping_same_class_gaussians_take_max() {
        let boxes = [bx(0, 2.0, 2.0, 14.0, 14.0), bx(0, 6.0, 6.0, 18.0, 18.0)];
        let t = splat_targets(&boxes, 32, 32, 4, 1, 0.7).unwrap();
        let a = splat_targets(&boxes[..1], 32, 32, 4, 1, 0.7).unwrap();
        let b = splat_targets(&boxes[1..], 32, 32, 4, 1, 0.7).unwrap();
        let mut summed_differs = false;
        for i in 0..t.heatmap.len() {
            assert_eq!(t.heatmap[i], a.heatmap[i].max(b.heatmap[i]));
            if (a.heatmap[i] + b.heatmap[i] - t.heatmap[i]).abs() > 1e-6 {
                summed_differs = true;
            }
        }
        assert!(summed_differs);
        assert_eq!(t.heatmap, splat_oracle(&boxes, 8, 8, 4.0, 1));
    }

    #[test]
    fn collision_keeps_larger_box() {
        let small = bx(0, 5.0, 5.0, 7.0, 7.0);
        let large = bx(1, 1.0, 1.0, 11.0, 11.0);
        for order in [[small, large], [large, small]] {
            let t = splat_targets(&order, 16, 16, 4, 2, 0.7).unwrap();
            let idx = 4 + 1;
            assert_eq!(t.sizes[idx], 2.5);
            assert_eq!(t.heatmap[idx], 1.0);
            assert_eq!(t.heatmap[16 + idx], 1.0);
        }
    }

    #[test]
    fn splat_rejects_bad_input() {
        assert!(splat_targets(&[bx(0, 0.0, 0.0, 4.0, 4.0)], 15, 16, 4, 1, 0.7).is_err());
        assert!(splat_targets(&[bx(1, 0.0, 0.0, 4.0, 4.0)], 16, 16, 4, 1, 0.7).is_err());
        assert!(splat_targets(&[bx(0, 5.0, 0.0, 4.0, 4.0)], 16, 16, 4, 1, 0.7).is_err());
    }

    fn t4(values: Vec<f64>, dims: &[usize]) -> Tensor {
        Tensor::from_vec(values, dims, &Device::Cpu).unwrap()
    }

    #[test]
    fn focal_loss_reference_values() {
        let l = keypoint_focal_loss(&t4(vec![0.5], &[1, 1, 1, 1]), &t4(vec![1.0], &[1, 1, 1, 1]), 2.0, 4.0).unwrap();
        assert!((ops::scalar(&l).unwrap() - 0.25 * 2f64.ln()).abs() < 1e-12);
        assert!((ops::scalar(&l).unwrap() - 0.1733).abs() < 1e-4);

        let t = splat_targets(&[bx(0, 4.0, 4.0, 12.0, 12.0)], 16, 16, 2, 1, 0.7).unwrap();
        let target = t4(t.heatmap.clone(), &[1, 1, 8, 8]);
        let perfect: Vec<f64> = t.heatmap.iter().map(|&y| if y == 1.0 { 1.0 - PROB_EPS } else { PROB_EPS }).collect();
        let l = ops::scalar(&keypoint_focal_loss(&t4(perfect, &[1, 1, 8, 8]), &target, 2.0, 4.0).unwrap()).unwrap();
        assert!((0.0..1e-3).contains(&l), "{l}");
        assert!(keypoint_focal_loss(&t4(vec![0.5; 4], &[1, 1, 2, 2]), &target, 2.0, 4.0).is_err());
    }

    fn preds_from(t: &TargetTriplet) -> PredictionTensors {
        let (h, w) = (t.grid_h, t.grid_w);
        PredictionTensors {
            heatmap: t4(t.heatmap.iter().map(|v| v.clamp(0.2, 0.8)).collect(), &[1, t.num_classes, h, w]),
            offsets: t4(t.offsets.clone(), &[1, 2, h, w]),
            sizes: t4(t.sizes.clone(), &[1, 2, h, w]),
        }
    }

    #[test]
    fn offset_and_size_reference_values() {
        let t = splat_targets(&[bx(0, 4.0, 4.0, 12.0, 10.0)], 16, 16, 2, 1, 0.7).unwrap();
        let tt = TargetTensors::from_triplets(&[t.clone()], DType::F64).unwrap();
        let exact = preds_from(&t);
        let (o, s) = offset_and_size_losses(&exact, &tt).unwrap();
        assert_eq!((ops::scalar(&o).unwrap(), ops::scalar(&s).unwrap()), (0.0, 0.0));

        let idx = t.mask.iter().position(|&m| m).unwrap();
        let mut off = t.offsets.clone();
        off[idx] += 0.1;
        off[64 + idx] -= 0.2;
        let mut noisy_sizes = t.sizes.clone();
        for (i, m) in t.mask.iter().enumerate() {
            if !m {
                noisy_sizes[i] = 7.0;
                off[i] = -3.0;
            }
        }
        let pred = PredictionTensors { offsets: t4(off, &[1, 2, 8, 8]), sizes: t4(noisy_sizes, &[1, 2, 8, 8]), ..exact };
        let (o, s) = offset_and_size_losses(&pred, &tt).unwrap();
        assert!((ops::scalar(&o).unwrap() - 0.3).abs() < 1e-12);
        assert_eq!(ops::scalar(&s).unwrap(), 0.0);

        let empty = TargetTensors::from_triplets(&[splat_targets(&[], 16, 16, 2, 1, 0.7).unwrap()], DType::F64).unwrap();
        let (o, s) = offset_and_size_losses(&pred, &empty).unwrap();
        assert_eq!((ops::scalar(&o).unwrap(), ops::scalar(&s).unwrap()), (0.0, 0.0));
    }

    #[test]
    fn detection_loss_weights() {
        assert!((combine_detection_loss(1.0, 0.2, 0.4, 1.0, 0.5).unwrap() - 1.4).abs() < 1e-12);
        assert_eq!(combine_detection_loss(1.0, 0.2, 0.4, 0.0, 0.0).unwrap(), 1.0);
        assert!(matches!(combine_detection_loss(1.0, f64::NAN, 0.4, 1.0, 0.5), Err(FactoryError::NonFinite { ref component, .. }) if component == "offset"));
        let d = LossWeights::default();
        assert_eq!((d.lambda_off, d.lambda_size, d.alpha, d.beta), (1.0, 0.5, 2.0, 4.0));
    }

    fn check_grad(values: Vec<f64>, dims: &[usize], f: impl Fn(&Tensor) -> Tensor) {
        let var = Var::from_tensor(&t4(values.clone(), dims)).unwrap();
        let grads = f(var.as_tensor()).backward().unwrap();
        let analytic = ops::to_f64_vec(grads.get(var.as_tensor()).unwrap()).unwrap();
        let h = 1e-6;
        for k in 0..values.len() {
            let eval = |d: f64| {
                let mut v = values.clone();
                v[k] += d;
                ops::scalar(&f(&t4(v, dims))).unwrap()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let err = (numeric - analytic[k]).abs();
            assert!(err < 1e-9 || err / numeric.abs().max(analytic[k].abs()) < 1e-4, "coord {k}: {numeric} vs {}", analytic[k]);
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let t = splat_targets(&[bx(0, 2.0, 2.0, 7.0, 9.0), bx(1, 8.0, 6.0, 14.0, 12.0)], 16, 16, 4, 2, 0.7).unwrap();
        let tt = TargetTensors::from_triplets(&[t], DType::F64).unwrap();
        let mut rng = rng::rng_from_seed(3);
        let probs: Vec<f64> = rng::normal_vec(&mut rng, 32).iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        check_grad(probs.clone(), &[1, 2, 4, 4], |p| keypoint_focal_loss(p, &tt.heatmap, 2.0, 4.0).unwrap());
        let offs: Vec<f64> = rng::normal_vec(&mut rng, 32);
        let sizes = t4(rng::normal_vec(&mut rng, 32), &[1, 2, 4, 4]);
        let hm = t4(probs, &[1, 2, 4, 4]);
        check_grad(offs.clone(), &[1, 2, 4, 4], |o| {
            let p = PredictionTensors { heatmap: hm.clone(), offsets: o.clone(), sizes: sizes.clone() };
            detection_loss(&p, &tt, &LossWeights::default()).unwrap().0
        });
        check_grad(ops::to_f64_vec(&sizes).unwrap(), &[1, 2, 4, 4], |s| {
            let p = PredictionTensors { heatmap: hm.clone(), offsets: t4(offs.clone(), &[1, 2, 4, 4]), sizes: s.clone() };
            offset_and_size_losses(&p, &tt).unwrap().1
        });
    }

    #[test]
    fn decode_edge_cases() {
        let empty = PredictionTriplet { grid_w: 4, grid_h: 4, num_classes: 1, heatmap: vec![0.5; 16], offsets: vec![0.0; 32], sizes: vec![1.0; 32] };
        assert!(decode(&empty, 4, &DecodeConfig::default()).is_empty());
        let mut plateau = empty.clone();
        plateau.heatmap[5] = 0.9;
        plateau.heatmap[6] = 0.9;
        assert_eq!(decode(&plateau, 4, &DecodeConfig::default()).len(), 2);
        let mut many = empty;
        many.heatmap = vec![0.9; 16];
        assert_eq!(decode(&many, 4, &DecodeConfig { score_thresh: 0.6, max_dets: 3 }).len(), 3);
    }

    prop_compose! {
        fn separated_boxes()(raw in prop::collection::vec((0usize..2, 0usize..16, 0usize..16, 0.0f64..1.0, 0.0f64..1.0, 1.0f64..12.0, 1.0f64..12.0), 1..6)) -> Vec<BoxLabel> {
            let mut cells: Vec<(usize, usize, usize)> = vec![];
            let mut out = vec![];
            for (c, kx, ky, fx, fy, w, h) in raw {
                let clash = cells.iter().any(|&(cc, x, y)| {
                    let d = kx.abs_diff(x).max(ky.abs_diff(y));
                    d == 0 || (cc == c && d < 2)
                });
                if clash { continue; }
                cells.push((c, kx, ky));
                let cx = (kx as f64 + fx.min(0.999)) * 4.0;
                let cy = (ky as f64 + fy.min(0.999)) * 4.0;
                let hw = (w / 2.0).min(cx).min(64.0 - cx);
                let hh = (h / 2.0).min(cy).min(64.0 - cy);
                if hw <= 0.0 || hh <= 0.0 { continue; }
                out.push(BoxLabel { class_id: c, x_min: cx - hw, y_min: cy - hh, x_max: cx + hw, y_max: cy + hh });
            }
            out
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn encode_decode_roundtrip(boxes in separated_boxes()) {
            let t = splat_targets(&boxes, 64, 64, 4, 2, 0.7).unwrap();
            let dets = decode(&t.as_prediction(), 4, &DecodeConfig::default());
            prop_assert_eq!(dets.len(), boxes.len());
            for b in &boxes {
                let hit = dets.iter().any(|d| d.label.class_id == b.class_id
                    && (d.label.x_min - b.x_min).abs() < 1e-6 && (d.label.y_min - b.y_min).abs() < 1e-6
                    && (d.label.x_max - b.x_max).abs() < 1e-6 && (d.label.y_max - b.y_max).abs() < 1e-6);
                prop_assert!(hit, "{:?} not recovered from {:?}", b, dets);
            }
        }

        #[test]
        fn splat_matches_oracle(boxes in separated_boxes()) {
            let t = splat_targets(&boxes, 64, 64, 4, 2, 0.7).unwrap();
            let oracle = splat_oracle(&boxes, 16, 16, 4.0, 2);
            for (a, b) in t.heatmap.iter().zip(&oracle) {
                prop_assert!((a - b).abs() <= 1e-12);
                prop_assert!((0.0..=1.0).contains(a));
            }
        }

        #[test]
        fn focal_loss_is_nonnegative(v in prop::collection::vec(0.0001f64..0.9999, 16), y in prop::collection::vec(0.0f64..1.0, 16)) {
            let mut y = y;
            y[3] = 1.0;
            let l = ops::scalar(&keypoint_focal_loss(&t4(v, &[1, 1, 4, 4]), &t4(y, &[1, 1, 4, 4]), 2.0, 4.0).unwrap()).unwrap();
            prop_assert!(l >= 0.0);
        }
    }

    fn tiny_gen() -> Generator {
        let cfg = GeneratorConfig { z_dim: 8, w_dim: 8, channels: vec![4, 4, 3, 2], mapping_layers: 1, w_avg_decay: 0.995 };
        Generator::new(cfg, DType::F32, 3).unwrap()
    }

    #[test]
    fn feature_extraction_contract() {
        let g = tiny_gen();
        let z = vec![LatentCode::from_seed(1, 8), LatentCode::from_seed(2, 8)];
        let layers: BTreeSet<usize> = [1, 2, 3].into();
        let f = extract_features(&g, &z, 1.0, &layers, 16).unwrap();
        assert_eq!(f.dims(), &[2, 4 + 4 + 3, 16, 16]);
        assert_eq!(feature_channels(&g, &layers), 11);
        assert!(extract_features(&g, &z, 1.0, &[5].into(), 16).is_err());
        let zero = Tensor::zeros((1, 2, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let constant = (Tensor::ones((1, 1, 4, 4), DType::F64, &Device::Cpu).unwrap() * 3.5).unwrap();
        let out = features_from_maps(&[zero, constant], 16).unwrap();
        let v = ops::to_f64_vec(&out).unwrap();
        assert!(v[..512].iter().all(|&x| x == 0.0));
        assert!(v[512..].iter().all(|&x| (x - 3.5).abs() < 1e-12));
    }

    #[test]
    fn zeroed_head_predicts_nothing_and_prediction_is_deterministic() {
        let g = tiny_gen();
        let cfg = LabelConfig { capture_layers: Some([1, 2, 3].into()), ..Default::default() };
        let head = LabelHead::new(11, 4, 2, DType::F32, 0).unwrap();
        let z = vec![LatentCode::from_seed(5, 8)];
        let a = predict_labels(&g, &head, &z, 1.0, &cfg).unwrap();
        assert_eq!(a, predict_labels(&g, &head, &z, 1.0, &cfg).unwrap());
        for name in ["heatmap.out.weight", "heatmap.out.bias"] {
            let n = head.params().values(name).unwrap().len();
            head.params().set_values(name, &vec![0.0; n]).unwrap();
        }
        assert!(predict_labels(&g, &head, &z, 1.0, &cfg).unwrap()[0].is_empty());
    }

    #[test]
    fn head_overfits_single_sample() {
        let g = tiny_gen();
        let labels = vec![bx(0, 2.0, 4.0, 10.0, 12.0), bx(1, 18.0, 16.0, 28.0, 30.0)];
        let z = LatentCode::from_seed(11, 8);
        let cfg = LabelConfig {
            iters: 500,
            hidden: 8,
            capture_layers: Some([1, 2, 3].into()),
            optimizer: OptimizerConfig { beta1: 0.9, ..OptimizerConfig::adam(1e-2) },
            ..Default::default()
        };
        let (head, trace) = train_label_head(&g, &[(z.clone(), labels.clone())], 2, 1.0, &cfg, 4).unwrap();
        assert!(trace.losses.iter().all(|l| l.is_finite()));
        let dets = &predict_labels(&g, &head, &[z], 1.0, &cfg).unwrap()[0];
        for b in &labels {
            let best = dets.iter().filter(|d| d.label.class_id == b.class_id).map(|d| crate::evaluation::iou(&d.label, b)).fold(0.0, f64::max);
            assert!(best >= 0.9, "{b:?} best iou {best} in {dets:?}");
        }
        let bad = vec![(LatentCode::from_seed(1, 8), vec![bx(3, 0.0, 0.0, 4.0, 4.0)])];
        assert!(train_label_head(&g, &bad, 2, 1.0, &cfg, 0).is_err());
    }
}
