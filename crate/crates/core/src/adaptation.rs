//! Generator adaptation: cross-domain distance consistency, the text-directional
//! loss, relaxed-realism adversarial terms, their weighted combination, the
//! anchor/patch alternation and the two-phase layer schedule, plus the training
//! loop that ties them together.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use candle_core::{DType, Device, Tensor, D};
use log::{debug, info, warn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::discriminator::{Discriminator, DiscriminatorMode};
use crate::embedding::JointEmbedder;
use crate::error::{ensure_finite, FactoryError, Result};
use crate::generator::{latents_to_tensor, Generator, LatentCode};
use crate::ops::{self, normalize_rows, softplus};
use crate::optim::OptimizerConfig;
use crate::params::Tracking;
use crate::rng::{self, FactoryRng};

/// Layer depth the "deep after layer 6 / shallow before layer 10" rule was stated for.
const REFERENCE_DEPTH: f64 = 14.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityDistribution {
    pub probs: Vec<f64>,
    pub layer: usize,
    pub anchor: usize,
}

/// Row-wise log-softmax of off-diagonal cosine similarities.
///
/// `features` is `[n, ...]`; the result is `[n, n - 1]` where row `i` lists
/// `log y_i(j)` for `j != i` in increasing `j`. Zero-norm features have cosine 0
/// with everything.
pub fn pairwise_log_probs(features: &Tensor) -> Result<Tensor> {
    let n = features.dim(0)?;
    if n < 2 {
        return Err(FactoryError::argument("similarity distributions need at least 2 samples"));
    }
    let flat = normalize_rows(&features.flatten_from(1)?)?;
    let sims = flat.matmul(&flat.t()?)?.flatten_all()?;
    let off_diag: Vec<u32> = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i * n + j) as u32)).collect();
    let idx = Tensor::from_vec(off_diag, n * (n - 1), features.device())?;
    let rows = sims.index_select(&idx, 0)?.reshape((n, n - 1))?;
    Ok(candle_nn::ops::log_softmax(&rows, D::Minus1)?)
}

pub fn similarity_distribution(features: &Tensor, anchor: usize, layer: usize) -> Result<SimilarityDistribution> {
    let n = features.dim(0)?;
    if anchor >= n {
        return Err(FactoryError::argument(format!("anchor {anchor} outside batch of {n}")));
    }
    let logp = pairwise_log_probs(features)?;
    let probs = ops::to_f64_vec(&logp.get(anchor)?.exp()?)?;
    Ok(SimilarityDistribution { probs, layer, anchor })
}

/// Mean over rows of `KL(q_i || p_i)` given log-probabilities, adapted (`q`) first.
pub fn kl_rows(adapted_logp: &Tensor, frozen_logp: &Tensor) -> Result<Tensor> {
    let q = adapted_logp.exp()?;
    let per_row = (q * (adapted_logp - frozen_logp)?)?.sum(D::Minus1)?;
    Ok(per_row.mean_all()?)
}

/// Distance-consistency term from already captured features, averaged over `layers`.
pub fn distance_consistency_from_features(
    adapted: &BTreeMap<usize, Tensor>,
    frozen: &BTreeMap<usize, Tensor>,
    layers: &BTreeSet<usize>,
) -> Result<Tensor> {
    if layers.is_empty() {
        return Err(FactoryError::argument("distance consistency needs a non-empty layer set"));
    }
    let mut total: Option<Tensor> = None;
    for m in layers {
        let (a, f) = match (adapted.get(m), frozen.get(m)) {
            (Some(a), Some(f)) => (a, f),
            _ => return Err(FactoryError::argument(format!("layer {m} was not captured"))),
        };
        let kl = kl_rows(&pairwise_log_probs(a)?, &pairwise_log_probs(&f.detach())?)?;
        total = Some(match total {
            None => kl,
            Some(t) => (t + kl)?,
        });
    }
    Ok((total.unwrap() / layers.len() as f64)?)
}

/// `L_dist`: KL between the adapted and frozen generators' pairwise-similarity
/// distributions, averaged over samples and the given layers. Gradients reach
/// only `adapted`.
pub fn distance_consistency_loss(frozen: &Generator, adapted: &Generator, z_batch: &[LatentCode], layers: &BTreeSet<usize>) -> Result<Tensor> {
    if z_batch.len() < 2 {
        return Err(FactoryError::argument("distance consistency needs at least 2 latents"));
    }
    if layers.is_empty() {
        return Err(FactoryError::argument("distance consistency needs a non-empty layer set"));
    }
    let a = adapted.generate(z_batch, 1.0, layers, Tracking::On)?;
    let f = frozen.generate(z_batch, 1.0, layers, Tracking::Off)?;
    distance_consistency_from_features(&a.features, &f.features, layers)
}

/// `ΔT = E_text(target) - E_text(source)`.
pub fn text_direction(embedder: &dyn JointEmbedder, source: &str, target: &str) -> Result<Vec<f64>> {
    if source == target {
        return Err(FactoryError::argument("source and target texts must differ"));
    }
    let s = embedder.embed_text(source)?;
    let t = embedder.embed_text(target)?;
    Ok(t.sub(&s))
}

#[derive(Debug)]
pub struct DirectionalLoss {
    pub loss: Tensor,
    /// Samples whose image direction (or the text direction) had zero norm; each contributes exactly 1.
    pub degenerate: usize,
}

const DEGENERATE_NORM: f64 = 1e-12;

/// `L_direction` from embedded image pairs: mean over the batch of
/// `1 - cos(E(adapted) - E(frozen), ΔT)`.
pub fn directional_loss_from_embeddings(adapted_emb: &Tensor, frozen_emb: &Tensor, delta_t: &[f64]) -> Result<DirectionalLoss> {
    let b = adapted_emb.dim(0)?;
    if b == 0 {
        return Err(FactoryError::argument("directional loss needs a non-empty batch"));
    }
    let dtype = adapted_emb.dtype();
    let dt_norm = delta_t.iter().map(|v| v * v).sum::<f64>().sqrt();
    if dt_norm < DEGENERATE_NORM {
        warn!("text direction has zero norm; directional loss is constant");
        let ones = Tensor::ones(b, dtype, adapted_emb.device())?;
        return Ok(DirectionalLoss {
            loss: ones.mean_all()?,
            degenerate: b,
        });
    }
    let unit_t: Vec<f64> = delta_t.iter().map(|v| v / dt_norm).collect();
    let unit_t = ops::from_f64(unit_t, &[delta_t.len(), 1], dtype)?;
    let delta_i = (adapted_emb - frozen_emb.detach())?;
    let dots = delta_i.matmul(&unit_t)?.squeeze(1)?;
    let norms = (delta_i.sqr()?.sum(D::Minus1)? + 1e-30)?.sqrt()?;
    let norm_values = ops::to_f64_vec(&norms)?;
    let mask: Vec<f64> = norm_values.iter().map(|&n| if n < DEGENERATE_NORM { 0.0 } else { 1.0 }).collect();
    let degenerate = mask.iter().filter(|&&m| m == 0.0).count();
    if degenerate > 0 {
        debug!("directional loss: {degenerate}/{b} degenerate samples (zero image direction)");
    }
    let mask = ops::from_f64(mask, &[b], dtype)?;
    let cos = (dots / norms.maximum(DEGENERATE_NORM)?)?.mul(&mask)?;
    let loss = (cos.neg()? + 1.0)?.mean_all()?;
    Ok(DirectionalLoss { loss, degenerate })
}

/// `L_direction` for a latent batch, with the frozen generator as reference.
pub fn directional_loss(
    embedder: &dyn JointEmbedder,
    frozen: &Generator,
    adapted: &Generator,
    z_batch: &[LatentCode],
    source_text: &str,
    target_text: &str,
) -> Result<DirectionalLoss> {
    if z_batch.is_empty() {
        return Err(FactoryError::argument("directional loss needs at least one latent"));
    }
    let delta_t = text_direction(embedder, source_text, target_text)?;
    let none = BTreeSet::new();
    let a = adapted.generate(z_batch, 1.0, &none, Tracking::On)?;
    let f = frozen.generate(z_batch, 1.0, &none, Tracking::Off)?;
    directional_loss_from_embeddings(&embedder.embed_images(&a.images)?, &embedder.embed_images(&f.images)?, &delta_t)
}

/// Non-saturating generator loss: `mean softplus(-D(fake))`.
pub fn generator_adversarial_loss(fake_logits: &Tensor) -> Result<Tensor> {
    if fake_logits.elem_count() == 0 {
        return Err(FactoryError::argument("adversarial loss needs a non-empty batch"));
    }
    Ok(softplus(&fake_logits.neg()?)?.mean_all()?)
}

/// Logistic discriminator loss: `mean softplus(-D(real)) + mean softplus(D(fake))`.
pub fn discriminator_adversarial_loss(real_logits: &Tensor, fake_logits: &Tensor) -> Result<Tensor> {
    if real_logits.elem_count() == 0 || fake_logits.elem_count() == 0 {
        return Err(FactoryError::argument("adversarial loss needs a non-empty batch"));
    }
    Ok((softplus(&real_logits.neg()?)?.mean_all()? + softplus(fake_logits)?.mean_all()?)?)
}

#[derive(Debug)]
pub struct AdversarialLosses {
    pub g_loss: Tensor,
    pub d_loss: Tensor,
}

/// Both adversarial losses for one mode. Patch-level logits are averaged over the grid.
pub fn adversarial_losses(d: &Discriminator, real: &Tensor, fake: &Tensor, mode: DiscriminatorMode, tracking: Tracking) -> Result<AdversarialLosses> {
    if real.dim(0)? == 0 || fake.dim(0)? == 0 {
        return Err(FactoryError::argument("adversarial loss needs a non-empty batch"));
    }
    let real_logits = d.score(real, mode, tracking)?;
    let fake_logits = d.score(fake, mode, tracking)?;
    Ok(AdversarialLosses {
        g_loss: generator_adversarial_loss(&fake_logits)?,
        d_loss: discriminator_adversarial_loss(&real_logits, &fake_logits)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationSchedule {
    pub lambda_1: f64,
    pub lambda_2: f64,
    pub lambda_f: usize,
    pub phase_switch_iter: usize,
    pub total_iters: usize,
    pub deep_layers: BTreeSet<usize>,
    pub shallow_layers: BTreeSet<usize>,
}

impl AdaptationSchedule {
    /// Defaults for a generator with `num_layers` synthesis layers.
    pub fn for_depth(num_layers: usize) -> Self {
        let (deep, shallow) = default_layer_sets(num_layers);
        Self {
            lambda_1: 1.0,
            lambda_2: 1.0,
            lambda_f: 2,
            phase_switch_iter: 500,
            total_iters: 1000,
            deep_layers: deep,
            shallow_layers: shallow,
        }
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if self.lambda_f < 1 {
            return Err(FactoryError::config("adapt.lambda_f must be >= 1"));
        }
        if self.phase_switch_iter > self.total_iters {
            return Err(FactoryError::config("adapt.phase_switch_iter must lie in [0, total_iters]"));
        }
        for set in [&self.deep_layers, &self.shallow_layers] {
            if set.is_empty() || set.iter().any(|&m| m == 0 || m > num_layers) {
                return Err(FactoryError::config(format!("distance layer sets must be non-empty subsets of 1..={num_layers}")));
            }
        }
        for (name, v) in [("lambda_1", self.lambda_1), ("lambda_2", self.lambda_2)] {
            if !v.is_finite() || v < 0.0 {
                return Err(FactoryError::config(format!("adapt.{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Deep = layers after 6 of 14, shallow = layers before 10 of 14, rescaled to `num_layers`.
pub fn default_layer_sets(num_layers: usize) -> (BTreeSet<usize>, BTreeSet<usize>) {
    let l = num_layers as f64;
    let deep_after = 6.0 * l / REFERENCE_DEPTH;
    let shallow_before = 10.0 * l / REFERENCE_DEPTH;
    let mut deep: BTreeSet<usize> = (1..=num_layers).filter(|&m| m as f64 > deep_after).collect();
    let mut shallow: BTreeSet<usize> = (1..=num_layers).filter(|&m| (m as f64) < shallow_before).collect();
    if deep.is_empty() {
        deep.insert(num_layers);
    }
    if shallow.is_empty() {
        shallow.insert(1);
    }
    (deep, shallow)
}

pub fn active_distance_layers(iteration: usize, schedule: &AdaptationSchedule) -> &BTreeSet<usize> {
    if iteration < schedule.phase_switch_iter {
        &schedule.deep_layers
    } else {
        &schedule.shallow_layers
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub bases: Vec<LatentCode>,
    pub sigma: f64,
}

impl AnchorSet {
    /// One standard-normal base latent per few-shot image.
    pub fn sample(count: usize, z_dim: usize, sigma: f64, rng: &mut FactoryRng) -> Self {
        Self {
            bases: (0..count).map(|_| LatentCode::sample(rng, z_dim)).collect(),
            sigma,
        }
    }
}

/// Picks the discriminator mode and latent batch for each iteration and remembers
/// whether the empty-anchor fallback has already been reported.
#[derive(Debug)]
pub struct ModeSelector {
    anchors: AnchorSet,
    warned: bool,
}

impl ModeSelector {
    pub fn new(anchors: AnchorSet) -> Self {
        Self { anchors, warned: false }
    }

    pub fn anchors(&self) -> &AnchorSet {
        &self.anchors
    }

    /// Iterations divisible by `lambda_f` draw from the anchor region and face the
    /// image-level discriminator; all others draw `z ~ N(0, I)` for the patch level.
    pub fn select(&mut self, iteration: usize, schedule: &AdaptationSchedule, batch: usize, z_dim: usize, rng: &mut FactoryRng) -> (DiscriminatorMode, Vec<LatentCode>) {
        let image_level = iteration % schedule.lambda_f.max(1) == 0;
        if image_level && !self.anchors.bases.is_empty() {
            let latents = (0..batch)
                .map(|_| {
                    let base = &self.anchors.bases[rng.random_range(0..self.anchors.bases.len())];
                    let noise = rng::normal_vec(rng, z_dim);
                    LatentCode {
                        values: base.values.iter().zip(noise).map(|(b, n)| b + self.anchors.sigma * n).collect(),
                        seed: base.seed,
                    }
                })
                .collect();
            return (DiscriminatorMode::ImageLevel, latents);
        }
        if image_level && !self.warned {
            warn!("anchor set is empty; image-level iterations fall back to the patch discriminator");
            self.warned = true;
        }
        let latents = (0..batch).map(|_| LatentCode::sample(rng, z_dim)).collect();
        (DiscriminatorMode::PatchLevel, latents)
    }
}

pub fn select_mode_and_latent(
    iteration: usize,
    schedule: &AdaptationSchedule,
    anchors: &AnchorSet,
    batch: usize,
    z_dim: usize,
    rng: &mut FactoryRng,
) -> (DiscriminatorMode, Vec<LatentCode>) {
    ModeSelector::new(anchors.clone()).select(iteration, schedule, batch, z_dim, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveParts {
    pub adversarial: f64,
    pub distance: f64,
    pub direction: f64,
}

/// `L_adv + λ1·L_dist + λ2·L_direction`.
pub fn combined_objective(parts: ObjectiveParts, lambda_1: f64, lambda_2: f64) -> Result<f64> {
    ensure_finite("adversarial", parts.adversarial)?;
    ensure_finite("distance_consistency", parts.distance)?;
    ensure_finite("directional", parts.direction)?;
    Ok(parts.adversarial + lambda_1 * parts.distance + lambda_2 * parts.direction)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub flip: bool,
    pub color_jitter: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { flip: true, color_jitter: false }
    }
}

/// Differentiable discriminator augmentation: optional horizontal flip of the
/// whole batch and per-sample brightness/contrast jitter.
pub fn augment(images: &Tensor, cfg: &AugmentConfig, rng: &mut FactoryRng) -> Result<Tensor> {
    let mut x = images.clone();
    if cfg.flip && rng.random_bool(0.5) {
        x = x.flip(&[3])?;
    }
    if cfg.color_jitter {
        let b = x.dim(0)?;
        let brightness: Vec<f64> = (0..b).map(|_| rng.random_range(-0.2..0.2)).collect();
        let contrast: Vec<f64> = (0..b).map(|_| rng.random_range(0.75..1.25)).collect();
        let br = ops::from_f64(brightness, &[b, 1, 1, 1], x.dtype())?;
        let ct = ops::from_f64(contrast, &[b, 1, 1, 1], x.dtype())?;
        let mean = x.mean_keepdim(3)?.mean_keepdim(2)?.mean_keepdim(1)?;
        x = x.broadcast_sub(&mean)?.broadcast_mul(&ct)?.broadcast_add(&mean)?.broadcast_add(&br)?;
    }
    Ok(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub lambda_1: f64,
    pub lambda_2: f64,
    pub lambda_f: usize,
    pub phase_switch_iter: usize,
    pub total_iters: usize,
    /// `N + 1` latents per iteration.
    pub batch_size: usize,
    pub anchor_sigma: f64,
    /// Relaxed realism on/off. Off means every iteration uses the full-image
    /// discriminator on `z ~ N(0, I)`.
    pub use_anchors: bool,
    /// Few-shot image guidance (adversarial term) on/off.
    pub use_adversarial: bool,
    /// Freezing strategy: generator layers `g_trainable_from..=L` and the
    /// discriminators' final layer only.
    pub freeze: bool,
    pub g_trainable_from: usize,
    pub deep_layers: Option<BTreeSet<usize>>,
    pub shallow_layers: Option<BTreeSet<usize>>,
    pub source_text: String,
    pub target_text: String,
    pub g_optimizer: OptimizerConfig,
    pub d_optimizer: OptimizerConfig,
    pub augment: AugmentConfig,
    pub log_every: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            lambda_1: 1.0,
            lambda_2: 1.0,
            lambda_f: 2,
            phase_switch_iter: 500,
            total_iters: 1000,
            batch_size: 4,
            anchor_sigma: 0.05,
            use_anchors: true,
            use_adversarial: true,
            freeze: true,
            g_trainable_from: 3,
            deep_layers: None,
            shallow_layers: None,
            source_text: "photo".into(),
            target_text: "outline drawing".into(),
            g_optimizer: OptimizerConfig::adam(2e-3),
            d_optimizer: OptimizerConfig::adam(2e-3),
            augment: AugmentConfig::default(),
            log_every: 100,
        }
    }
}

impl AdaptConfig {
    pub fn schedule(&self, num_layers: usize) -> Result<AdaptationSchedule> {
        let (deep, shallow) = default_layer_sets(num_layers);
        let s = AdaptationSchedule {
            lambda_1: self.lambda_1,
            lambda_2: self.lambda_2,
            lambda_f: self.lambda_f,
            phase_switch_iter: self.phase_switch_iter,
            total_iters: self.total_iters,
            deep_layers: self.deep_layers.clone().unwrap_or(deep),
            shallow_layers: self.shallow_layers.clone().unwrap_or(shallow),
        };
        s.validate(num_layers)?;
        if self.batch_size < 2 {
            return Err(FactoryError::config("adapt.batch_size must be >= 2"));
        }
        if self.freeze && (self.g_trainable_from == 0 || self.g_trainable_from > num_layers) {
            return Err(FactoryError::config("adapt.g_trainable_from outside generator depth"));
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptRecord {
    pub iteration: usize,
    pub mode: DiscriminatorMode,
    pub total: f64,
    pub adversarial: f64,
    pub distance: f64,
    pub direction: f64,
    pub d_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdaptTrace {
    pub records: Vec<AdaptRecord>,
    pub degenerate_direction_samples: usize,
    pub seconds: f64,
}

/// Runs the full adaptation loop, mutating `adapted` and `disc` in place.
///
/// `frozen` must be a frozen snapshot of the pretrained generator and
/// `fewshot` a `[K, 3, H, W]` tensor of target images in `[-1, 1]`.
#[allow(clippy::too_many_arguments)]
pub fn adapt_generator(
    frozen: &Generator,
    adapted: &mut Generator,
    disc: &mut Discriminator,
    fewshot: &Tensor,
    embedder: &dyn JointEmbedder,
    cfg: &AdaptConfig,
    seed: u64,
) -> Result<AdaptTrace> {
    let start = Instant::now();
    let num_layers = adapted.num_layers();
    let schedule = cfg.schedule(num_layers)?;
    let k = fewshot.dim(0)?;
    if k == 0 {
        return Err(FactoryError::argument("adaptation needs at least one few-shot image"));
    }
    let z_dim = adapted.config().z_dim;
    let dtype = adapted.dtype();
    let fewshot = fewshot.to_dtype(dtype)?;

    if cfg.freeze {
        adapted.set_trainable_layers(&(cfg.g_trainable_from..=num_layers).collect())?;
        disc.freeze_all_but_final();
    } else {
        adapted.set_trainable_layers(&(1..=num_layers).collect())?;
        disc.unfreeze_all();
    }
    let mut g_opt = cfg.g_optimizer.build(adapted.trainable_vars())?;
    let mut d_opt = cfg.d_optimizer.build(disc.trainable_vars())?;

    let mut rng = rng::rng_from_seed(rng::derive_seed(seed, "adapt"));
    let anchors = if cfg.use_anchors {
        AnchorSet::sample(k, z_dim, cfg.anchor_sigma, &mut rng)
    } else {
        AnchorSet { bases: vec![], sigma: cfg.anchor_sigma }
    };
    let mut selector = ModeSelector::new(anchors);
    let delta_t = if schedule.lambda_2 > 0.0 {
        text_direction(embedder, &cfg.source_text, &cfg.target_text)?
    } else {
        vec![]
    };

    let mut trace = AdaptTrace::default();
    for it in 0..schedule.total_iters {
        let (mode, latents) = if cfg.use_anchors {
            selector.select(it, &schedule, cfg.batch_size, z_dim, &mut rng)
        } else {
            let z = (0..cfg.batch_size).map(|_| LatentCode::sample(&mut rng, z_dim)).collect();
            (DiscriminatorMode::ImageLevel, z)
        };
        let layers = active_distance_layers(it, &schedule);
        let capture = if schedule.lambda_1 > 0.0 { layers.clone() } else { BTreeSet::new() };

        let z = latents_to_tensor(&latents, dtype)?;
        let w = adapted.map_batch(&z, Tracking::On)?;
        let fake = adapted.synthesize(&w, &capture, Tracking::On)?;

        let mut d_loss_value = 0.0;
        let adversarial = if cfg.use_adversarial {
            let idx: Vec<u32> = (0..cfg.batch_size).map(|_| rng.random_range(0..k) as u32).collect();
            let real = fewshot.index_select(&Tensor::from_vec(idx, cfg.batch_size, &Device::Cpu)?, 0)?;
            let real = augment(&real, &cfg.augment, &mut rng)?;
            let fake_d = augment(&fake.images.detach(), &cfg.augment, &mut rng)?;
            let d_loss = discriminator_adversarial_loss(&disc.score(&real, mode, Tracking::On)?, &disc.score(&fake_d, mode, Tracking::On)?)?;
            d_loss_value = ensure_finite("discriminator", ops::scalar(&d_loss)?)?;
            d_opt.step(&d_loss.backward()?)?;

            let fake_g = augment(&fake.images, &cfg.augment, &mut rng)?;
            Some(generator_adversarial_loss(&disc.score(&fake_g, mode, Tracking::Off)?)?)
        } else {
            None
        };

        let needs_frozen = schedule.lambda_1 > 0.0 || schedule.lambda_2 > 0.0;
        let reference = if needs_frozen {
            let wf = frozen.map_batch(&z, Tracking::Off)?;
            Some(frozen.synthesize(&wf, &capture, Tracking::Off)?)
        } else {
            None
        };
        let distance = match &reference {
            Some(r) if schedule.lambda_1 > 0.0 => Some(distance_consistency_from_features(&fake.features, &r.features, layers)?),
            _ => None,
        };
        let direction = match &reference {
            Some(r) if schedule.lambda_2 > 0.0 => {
                let out = directional_loss_from_embeddings(&embedder.embed_images(&fake.images)?, &embedder.embed_images(&r.images)?, &delta_t)?;
                trace.degenerate_direction_samples += out.degenerate;
                Some(out.loss)
            }
            _ => None,
        };

        let value = |t: &Option<Tensor>| -> Result<f64> { t.as_ref().map(ops::scalar).transpose().map(|v| v.unwrap_or(0.0)) };
        let parts = ObjectiveParts {
            adversarial: value(&adversarial)?,
            distance: value(&distance)?,
            direction: value(&direction)?,
        };
        let total_value = combined_objective(parts, schedule.lambda_1, schedule.lambda_2)?;

        let mut total: Option<Tensor> = adversarial;
        for (term, weight) in [(distance, schedule.lambda_1), (direction, schedule.lambda_2)] {
            if let Some(t) = term {
                let weighted = (t * weight)?;
                total = Some(match total {
                    None => weighted,
                    Some(acc) => (acc + weighted)?,
                });
            }
        }
        if let Some(total) = total {
            g_opt.step(&total.backward()?)?;
        }
        adapted.update_w_avg(&w)?;

        if cfg.log_every > 0 && (it % cfg.log_every == 0 || it + 1 == schedule.total_iters) {
            info!(
                "adapt it {it:4} {:?}: total {total_value:.4} adv {:.4} dist {:.4} dir {:.4} d {:.4}",
                mode, parts.adversarial, parts.distance, parts.direction, d_loss_value
            );
        }
        trace.records.push(AdaptRecord {
            iteration: it,
            mode,
            total: total_value,
            adversarial: parts.adversarial,
            distance: parts.distance,
            direction: parts.direction,
            d_loss: d_loss_value,
        });
    }
    trace.seconds = start.elapsed().as_secs_f64();
    Ok(trace)
}

/// Tensor of `[K, 3, H, W]` from a list of `[3, H, W]` images.
pub fn stack_images(images: &[Tensor], dtype: DType) -> Result<Tensor> {
    if images.is_empty() {
        return Err(FactoryError::argument("no images to stack"));
    }
    Ok(Tensor::stack(images, 0)?.to_dtype(dtype)?)
}
