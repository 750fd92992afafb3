//! Desk-scale stand-ins for the externally pretrained pieces: a source
//! generator fitted to the procedural source domain, the discriminator
//! pretrained against it, and text embeddings grounded in rendered examples.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use candle_core::DType;
use log::info;
use serde::{Deserialize, Serialize};

use crate::adaptation::discriminator_adversarial_loss;
use crate::discriminator::{Discriminator, DiscriminatorConfig, DiscriminatorMode};
use crate::embedding::{JointEmbedder, ToyEmbedder};
use crate::error::{ensure_finite, Result};
use crate::generator::{latents_to_tensor, Generator, GeneratorConfig, LatentCode};
use crate::ops;
use crate::optim::OptimizerConfig;
use crate::params::Tracking;
use crate::rng::{self, FactoryRng};
use crate::shapes::{self, Style};

pub fn desk_generator_config() -> GeneratorConfig {
    GeneratorConfig {
        z_dim: 64,
        w_dim: 64,
        channels: vec![32, 32, 16, 8],
        mapping_layers: 2,
        w_avg_decay: 0.995,
    }
}

pub fn desk_discriminator_config() -> DiscriminatorConfig {
    DiscriminatorConfig {
        image_side: 32,
        channels: vec![8, 16, 32],
        patch_tap_layer: 2,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SourcePretrainConfig {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub regression_iters: usize,
    pub discriminator_iters: usize,
    pub batch_size: usize,
    pub g_optimizer: OptimizerConfig,
    pub d_optimizer: OptimizerConfig,
}

impl Default for SourcePretrainConfig {
    fn default() -> Self {
        Self {
            generator: desk_generator_config(),
            discriminator: desk_discriminator_config(),
            regression_iters: 4000,
            discriminator_iters: 300,
            batch_size: 8,
            g_optimizer: OptimizerConfig { beta1: 0.9, ..OptimizerConfig::adam(2e-3) },
            d_optimizer: OptimizerConfig::adam(2e-3),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SourcePretrainTrace {
    pub regression: Vec<f64>,
    pub discriminator: Vec<f64>,
    pub seconds: f64,
}

/// Fits `G(z)` to the source rendering of `scene(z)` by pixel regression, then
/// trains the discriminator to separate source renders from `G` samples.
pub fn pretrain_source_models(cfg: &SourcePretrainConfig, seed: u64) -> Result<(Generator, Discriminator, SourcePretrainTrace)> {
    let start = Instant::now();
    let mut g = Generator::new(cfg.generator.clone(), DType::F32, rng::derive_seed(seed, "source-generator"))?;
    let d = Discriminator::new(cfg.discriminator.clone(), DType::F32, rng::derive_seed(seed, "source-discriminator"))?;
    let mut r = rng::rng_from_seed(rng::derive_seed(seed, "source-pretrain"));
    let mut trace = SourcePretrainTrace::default();

    trace.regression = fit_source_generator(&mut g, cfg.regression_iters, cfg.batch_size, &cfg.g_optimizer, &mut r)?;
    trace.discriminator = fit_source_discriminator(&g, &d, cfg.discriminator_iters, cfg.batch_size, &cfg.d_optimizer, &mut r)?;
    trace.seconds = start.elapsed().as_secs_f64();
    Ok((g, d, trace))
}

/// Pixel regression of `G(z)` onto the source rendering of `scene(z)`; returns the MSE trace.
pub fn fit_source_generator(g: &mut Generator, iters: usize, batch_size: usize, optimizer: &OptimizerConfig, r: &mut FactoryRng) -> Result<Vec<f64>> {
    let side = g.output_side();
    let z_dim = g.config().z_dim;
    let mut opt = optimizer.build(g.trainable_vars())?;
    let none = BTreeSet::new();
    let mut trace = Vec::with_capacity(iters);
    for it in 0..iters {
        let latents: Vec<LatentCode> = (0..batch_size).map(|_| LatentCode::sample(r, z_dim)).collect();
        let target = shapes::render_batch(&shapes::scenes_for_latents(&latents, side)?, Style::Source, g.dtype())?;
        let z = latents_to_tensor(&latents, g.dtype())?;
        let w = g.map_batch(&z, Tracking::On)?;
        let out = g.synthesize(&w, &none, Tracking::On)?;
        let loss = (out.images - target)?.sqr()?.mean_all()?;
        let value = ensure_finite("source regression", ops::scalar(&loss)?)?;
        opt.step(&loss.backward()?)?;
        g.update_w_avg(&w)?;
        trace.push(value);
        if it % 250 == 0 || it + 1 == iters {
            info!("source generator it {it}: mse {value:.5}");
        }
    }
    Ok(trace)
}

/// Trains `d` to separate source renders from `G` samples, alternating
/// image-level and patch-level scoring; returns the loss trace.
pub fn fit_source_discriminator(g: &Generator, d: &Discriminator, iters: usize, batch_size: usize, optimizer: &OptimizerConfig, r: &mut FactoryRng) -> Result<Vec<f64>> {
    let side = g.output_side();
    let z_dim = g.config().z_dim;
    let none = BTreeSet::new();
    let mut opt = optimizer.build(d.trainable_vars())?;
    let mut trace = Vec::with_capacity(iters);
    for it in 0..iters {
        let real_scenes: Vec<_> = (0..batch_size).map(|_| shapes::sample_scene(r, side)).collect();
        let real = shapes::render_batch(&real_scenes, Style::Source, g.dtype())?;
        let latents: Vec<LatentCode> = (0..batch_size).map(|_| LatentCode::sample(r, z_dim)).collect();
        let fake = g.generate(&latents, 1.0, &none, Tracking::Off)?.images;
        let mode = if it % 2 == 0 { DiscriminatorMode::ImageLevel } else { DiscriminatorMode::PatchLevel };
        let loss = discriminator_adversarial_loss(&d.score(&real, mode, Tracking::On)?, &d.score(&fake, mode, Tracking::On)?)?;
        let value = ensure_finite("source discriminator", ops::scalar(&loss)?)?;
        opt.step(&loss.backward()?)?;
        trace.push(value);
        if it % 100 == 0 || it + 1 == iters {
            info!("source discriminator it {it}: loss {value:.4}");
        }
    }
    Ok(trace)
}

/// Mean squared pixel error between `G(z)` and the source rendering of `scene(z)`, per latent.
pub fn source_fidelity(g: &Generator, latents: &[LatentCode], psi: f64) -> Result<Vec<f64>> {
    let side = g.output_side();
    let img = g.generate(latents, psi, &BTreeSet::new(), Tracking::Off)?.images;
    let target = shapes::render_batch(&shapes::scenes_for_latents(latents, side)?, Style::Source, img.dtype())?;
    let err = (img - target)?.sqr()?.mean((1, 2, 3))?;
    ops::to_f64_vec(&err)
}

/// Text table for the toy embedder: each prompt maps to the normalized mean
/// image embedding of procedural renders in the style it names.
pub fn grounded_texts(embedder: &dyn JointEmbedder, side: usize, samples: usize, seed: u64) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut r = rng::rng_from_seed(rng::derive_seed(seed, "text-grounding"));
    let scenes: Vec<_> = (0..samples).map(|_| shapes::sample_scene(&mut r, side)).collect();
    let mut out = BTreeMap::new();
    for (text, style) in [(shapes::SOURCE_TEXT, Style::Source), (shapes::TARGET_TEXT, Style::Target)] {
        let e = embedder.embed_images(&shapes::render_batch(&scenes, style, DType::F32)?)?;
        out.insert(text.to_string(), ops::to_f64_vec(&e.mean(0)?)?);
    }
    Ok(out)
}

pub fn grounded_embedder(dim: usize, seed: u64, side: usize) -> Result<ToyEmbedder> {
    let base = ToyEmbedder::new(dim, seed);
    let texts = grounded_texts(&base, side, 64, seed)?;
    Ok(base.with_texts(texts))
}
