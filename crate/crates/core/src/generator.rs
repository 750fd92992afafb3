//! Compact style-based generator: a mapping network `z -> w` followed by a
//! synthesis network of `L` layers (4x4, 8x8, ..., 2^(L+1) square) with
//! modulated convolutions and skip-connected RGB outputs.
//!
//! Layer ids used for freezing: `1..=L` are the synthesis layers (each owns its
//! convolutions, style affines and RGB head). The mapping network and the
//! learned input are tagged as layer 0 and are trainable exactly when layer 1 is.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{FactoryError, Result};
use crate::ops::{self, leaky_relu};
use crate::params::{ParamStore, Tracking};
use crate::rng::{self, FactoryRng};

const LRELU_SLOPE: f64 = 0.2;
const LRELU_GAIN: f64 = std::f64::consts::SQRT_2;
const MAPPING_LAYER: usize = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub z_dim: usize,
    pub w_dim: usize,
    /// Channel width of each synthesis layer; its length is the layer count `L`.
    pub channels: Vec<usize>,
    pub mapping_layers: usize,
    pub w_avg_decay: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            z_dim: 512,
            w_dim: 512,
            channels: vec![64, 64, 48, 32, 16, 8],
            mapping_layers: 2,
            w_avg_decay: 0.995,
        }
    }
}

impl GeneratorConfig {
    pub fn num_layers(&self) -> usize {
        self.channels.len()
    }

    pub fn output_side(&self) -> usize {
        layer_side(self.num_layers())
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(FactoryError::config("generator.channels must be non-empty and positive"));
        }
        if self.z_dim == 0 || self.w_dim == 0 || self.mapping_layers == 0 {
            return Err(FactoryError::config("generator dimensions must be positive"));
        }
        if !(0.0..1.0).contains(&self.w_avg_decay) {
            return Err(FactoryError::config("generator.w_avg_decay must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Spatial side of synthesis layer `m` (1-based): 4, 8, 16, ...
pub fn layer_side(m: usize) -> usize {
    1 << (m + 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub values: Vec<f64>,
    pub seed: u64,
}

impl LatentCode {
    /// Standard-normal latent drawn from a per-sample seed.
    pub fn from_seed(seed: u64, dim: usize) -> Self {
        let mut r = rng::rng_from_seed(rng::derive_seed(seed, "latent"));
        Self {
            values: rng::normal_vec(&mut r, dim),
            seed,
        }
    }

    pub fn sample(rng: &mut FactoryRng, dim: usize) -> Self {
        Self {
            values: rng::normal_vec(rng, dim),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StyleCode {
    pub values: Vec<f64>,
}

/// Batched synthesis output: images `[B, 3, H, W]` in `[-1, 1]` plus the
/// requested per-layer activations `[B, C_m, side_m, side_m]`.
#[derive(Debug, Clone)]
pub struct SynthesisResult {
    pub images: Tensor,
    pub features: BTreeMap<usize, Tensor>,
}

pub fn latents_to_tensor(latents: &[LatentCode], dtype: DType) -> Result<Tensor> {
    let dim = latents.first().map(|z| z.values.len()).unwrap_or(0);
    let mut flat = Vec::with_capacity(latents.len() * dim);
    for z in latents {
        if z.values.len() != dim {
            return Err(FactoryError::config("latent batch has mixed dimensions"));
        }
        flat.extend_from_slice(&z.values);
    }
    ops::from_f64(flat, &[latents.len(), dim], dtype)
}

pub struct Generator {
    config: GeneratorConfig,
    store: ParamStore,
    w_avg: Vec<f64>,
}

impl Generator {
    pub fn new(config: GeneratorConfig, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::rng_from_seed(rng::derive_seed(seed, "generator-init"));
        let mut store = ParamStore::new(dtype);
        let (z_dim, w_dim) = (config.z_dim, config.w_dim);

        for i in 0..config.mapping_layers {
            let fan_in = if i == 0 { z_dim } else { w_dim };
            store.add(&format!("mapping.{i}.weight"), MAPPING_LAYER, &[w_dim, fan_in], rng::normal_vec(&mut rng, w_dim * fan_in))?;
            store.add(&format!("mapping.{i}.bias"), MAPPING_LAYER, &[w_dim], vec![0.0; w_dim])?;
        }

        let c1 = config.channels[0];
        store.add("input.const", MAPPING_LAYER, &[1, c1, 4, 4], rng::normal_vec(&mut rng, c1 * 16))?;
        store.add("input.proj", MAPPING_LAYER, &[c1 * 16, w_dim], rng::normal_vec(&mut rng, c1 * 16 * w_dim))?;

        let mut cin = c1;
        for (idx, &cout) in config.channels.iter().enumerate() {
            let m = idx + 1;
            let convs: &[(&str, usize)] = if m == 1 { &[("conv1", c1)] } else { &[("conv0", cin), ("conv1", cout)] };
            for &(name, conv_in) in convs {
                add_modconv(&mut store, &mut rng, &format!("layer{m}.{name}"), m, conv_in, cout, 3, w_dim)?;
            }
            add_modconv(&mut store, &mut rng, &format!("layer{m}.to_rgb"), m, cout, 3, 1, w_dim)?;
            cin = cout;
        }

        let layers: BTreeSet<usize> = (0..=config.num_layers()).collect();
        store.set_trainable(layers);
        let w_avg = vec![0.0; w_dim];
        Ok(Self { config, store, w_avg })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn num_layers(&self) -> usize {
        self.config.num_layers()
    }

    pub fn output_side(&self) -> usize {
        self.config.output_side()
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn w_avg(&self) -> StyleCode {
        StyleCode { values: self.w_avg.clone() }
    }

    pub fn map_latent(&self, z: &LatentCode) -> Result<StyleCode> {
        if z.values.len() != self.config.z_dim {
            return Err(FactoryError::config(format!(
                "latent has dimension {}, generator expects {}",
                z.values.len(),
                self.config.z_dim
            )));
        }
        let t = ops::from_f64(z.values.clone(), &[1, z.values.len()], self.dtype())?;
        let w = self.map_batch(&t, Tracking::Off)?;
        Ok(StyleCode { values: ops::to_f64_vec(&w)? })
    }

    /// Mapping network on a `[B, z_dim]` batch.
    pub fn map_batch(&self, z: &Tensor, tracking: Tracking) -> Result<Tensor> {
        let (_, dim) = z.dims2()?;
        if dim != self.config.z_dim {
            return Err(FactoryError::config(format!("latent has dimension {dim}, generator expects {}", self.config.z_dim)));
        }
        let z = z.to_dtype(self.dtype())?;
        // pixel norm
        let mut x = z.broadcast_div(&(z.sqr()?.mean_keepdim(D::Minus1)? + 1e-8)?.sqrt()?)?;
        for i in 0..self.config.mapping_layers {
            let w = self.store.get(&format!("mapping.{i}.weight"), tracking)?;
            let b = self.store.get(&format!("mapping.{i}.bias"), tracking)?;
            let scale = 1.0 / (w.dim(1)? as f64).sqrt();
            x = x.matmul(&(w.t()? * scale)?)?.broadcast_add(&b)?;
            x = (leaky_relu(&x, LRELU_SLOPE)? * LRELU_GAIN)?;
        }
        Ok(x)
    }

    /// `w_avg + psi * (w - w_avg)`, evaluated as `psi * w + (1 - psi) * w_avg`
    /// so the endpoints are exact.
    pub fn truncate_style(&self, w: &StyleCode, psi: f64) -> Result<StyleCode> {
        check_psi(psi)?;
        if w.values.len() != self.w_avg.len() {
            return Err(FactoryError::config("style code dimension mismatch"));
        }
        let values = w.values.iter().zip(&self.w_avg).map(|(&w, &a)| psi * w + (1.0 - psi) * a).collect();
        Ok(StyleCode { values })
    }

    pub fn truncate_batch(&self, w: &Tensor, psi: f64) -> Result<Tensor> {
        check_psi(psi)?;
        if psi == 1.0 {
            return Ok(w.clone());
        }
        let avg = ops::from_f64(self.w_avg.clone(), &[1, self.w_avg.len()], w.dtype())?;
        Ok(((w * psi)?.broadcast_add(&(avg * (1.0 - psi))?))?)
    }

    /// Synthesis network on a `[B, w_dim]` style batch.
    pub fn synthesize(&self, w: &Tensor, capture: &BTreeSet<usize>, tracking: Tracking) -> Result<SynthesisResult> {
        let layers = self.num_layers();
        if let Some(&bad) = capture.iter().find(|&&m| m == 0 || m > layers) {
            return Err(FactoryError::argument(format!("capture layer {bad} outside 1..={layers}")));
        }
        let w = w.to_dtype(self.dtype())?;
        let b = w.dim(0)?;
        let c1 = self.config.channels[0];
        let store = &self.store;
        let w_dim = self.config.w_dim as f64;

        let constant = store.get("input.const", tracking)?;
        let proj = store.get("input.proj", tracking)?;
        let projected = w.matmul(&(proj.t()? * (1.0 / w_dim.sqrt()))?)?.reshape((b, c1, 4, 4))?;
        let mut x = projected.broadcast_add(&constant)?;

        let mut image: Option<Tensor> = None;
        let mut features = BTreeMap::new();
        for m in 1..=layers {
            if m > 1 {
                let side = layer_side(m);
                x = x.upsample_nearest2d(side, side)?;
                x = modconv(store, &format!("layer{m}.conv0"), &x, &w, true, tracking)?;
                x = (leaky_relu(&x, LRELU_SLOPE)? * LRELU_GAIN)?;
            }
            x = modconv(store, &format!("layer{m}.conv1"), &x, &w, true, tracking)?;
            x = (leaky_relu(&x, LRELU_SLOPE)? * LRELU_GAIN)?;
            if capture.contains(&m) {
                features.insert(m, x.clone());
            }
            let rgb = modconv(store, &format!("layer{m}.to_rgb"), &x, &w, false, tracking)?;
            image = Some(match image {
                None => rgb,
                Some(prev) => {
                    let side = layer_side(m);
                    (prev.upsample_nearest2d(side, side)? + rgb)?
                }
            });
        }
        let images = image.expect("at least one layer").clamp(-1.0, 1.0)?;
        Ok(SynthesisResult { images, features })
    }

    /// Map, truncate and synthesize a batch of latents.
    pub fn generate(&self, latents: &[LatentCode], psi: f64, capture: &BTreeSet<usize>, tracking: Tracking) -> Result<SynthesisResult> {
        let z = latents_to_tensor(latents, self.dtype())?;
        let w = self.map_batch(&z, tracking)?;
        let w = self.truncate_batch(&w, psi)?;
        self.synthesize(&w, capture, tracking)
    }

    /// Deep copy with every layer frozen.
    pub fn snapshot_frozen(&self) -> Result<Self> {
        let mut store = self.store.deep_copy()?;
        store.set_trainable(BTreeSet::new());
        Ok(Self {
            config: self.config.clone(),
            store,
            w_avg: self.w_avg.clone(),
        })
    }

    /// Restricts optimizer updates to synthesis layers in `layers` (subset of `1..=L`).
    pub fn set_trainable_layers(&mut self, layers: &BTreeSet<usize>) -> Result<()> {
        let l = self.num_layers();
        if let Some(&bad) = layers.iter().find(|&&m| m == 0 || m > l) {
            return Err(FactoryError::argument(format!("trainable layer {bad} outside 1..={l}")));
        }
        let mut set = layers.clone();
        if layers.contains(&1) {
            set.insert(MAPPING_LAYER);
        }
        self.store.set_trainable(set);
        Ok(())
    }

    /// Synthesis layers currently trainable (layer 0 omitted).
    pub fn trainable_layers(&self) -> BTreeSet<usize> {
        self.store.trainable().iter().copied().filter(|&m| m != MAPPING_LAYER).collect()
    }

    pub fn trainable_vars(&self) -> Vec<candle_core::Var> {
        self.store.trainable_vars()
    }

    /// Exponential moving average of the mapped styles seen during training.
    pub fn update_w_avg(&mut self, w_batch: &Tensor) -> Result<()> {
        let mean = ops::to_f64_vec(&w_batch.detach().mean(0)?)?;
        let decay = self.config.w_avg_decay;
        for (avg, m) in self.w_avg.iter_mut().zip(mean) {
            *avg = decay * *avg + (1.0 - decay) * m;
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            header: serde_json::json!({
                "kind": "generator",
                "num_layers": self.num_layers(),
                "z_dim": self.config.z_dim,
                "w_dim": self.config.w_dim,
                "channels": self.config.channels,
                "mapping_layers": self.config.mapping_layers,
                "w_avg_decay": self.config.w_avg_decay,
                "w_avg": self.w_avg,
            }),
            tensors: self.store.to_named_tensors()?,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint, dtype: DType) -> Result<Self> {
        let h = &ck.header;
        if h.get("kind").and_then(|k| k.as_str()) != Some("generator") {
            return Err(FactoryError::config("checkpoint is not a generator"));
        }
        let config = GeneratorConfig {
            z_dim: header_usize(h, "z_dim")?,
            w_dim: header_usize(h, "w_dim")?,
            channels: serde_json::from_value(h["channels"].clone())?,
            mapping_layers: header_usize(h, "mapping_layers")?,
            w_avg_decay: h["w_avg_decay"].as_f64().unwrap_or(0.995),
        };
        if header_usize(h, "num_layers")? != config.num_layers() {
            return Err(FactoryError::config("generator header: num_layers disagrees with channels"));
        }
        let mut g = Self::new(config, dtype, 0)?;
        g.store.load_named(&ck.tensors)?;
        g.w_avg = serde_json::from_value(h["w_avg"].clone())?;
        if g.w_avg.len() != g.config.w_dim {
            return Err(FactoryError::config("generator header: w_avg has wrong dimension"));
        }
        Ok(g)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path, dtype: DType) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, dtype)
    }
}

pub(crate) fn header_usize(h: &serde_json::Value, key: &str) -> Result<usize> {
    h.get(key)
        .and_then(|v| v.as_u64())
        .map(|v| v as usize)
        .ok_or_else(|| FactoryError::config(format!("checkpoint header lacks `{key}`")))
}

fn check_psi(psi: f64) -> Result<()> {
    if (0.0..=1.0).contains(&psi) {
        Ok(())
    } else {
        Err(FactoryError::argument(format!("truncation psi {psi} outside [0, 1]")))
    }
}

#[allow(clippy::too_many_arguments)]
fn add_modconv(store: &mut ParamStore, rng: &mut FactoryRng, prefix: &str, layer: usize, cin: usize, cout: usize, k: usize, w_dim: usize) -> Result<()> {
    store.add(&format!("{prefix}.weight"), layer, &[cout, cin, k, k], rng::normal_vec(rng, cout * cin * k * k))?;
    store.add(&format!("{prefix}.bias"), layer, &[cout], vec![0.0; cout])?;
    store.add(&format!("{prefix}.affine.weight"), layer, &[cin, w_dim], rng::normal_vec(rng, cin * w_dim))?;
    store.add(&format!("{prefix}.affine.bias"), layer, &[cin], vec![1.0; cin])?;
    Ok(())
}

/// Modulated convolution in its unfused form: scale input channels by the
/// per-sample style, convolve with the shared kernel, then (optionally)
/// demodulate each output channel.
fn modconv(store: &ParamStore, prefix: &str, x: &Tensor, w: &Tensor, demodulate: bool, tracking: Tracking) -> Result<Tensor> {
    let weight = store.get(&format!("{prefix}.weight"), tracking)?;
    let bias = store.get(&format!("{prefix}.bias"), tracking)?;
    let aw = store.get(&format!("{prefix}.affine.weight"), tracking)?;
    let ab = store.get(&format!("{prefix}.affine.bias"), tracking)?;
    let (cout, cin, k, _) = weight.dims4()?;
    let b = x.dim(0)?;

    let styles = w.matmul(&(aw.t()? * (1.0 / (aw.dim(1)? as f64).sqrt()))?)?.broadcast_add(&ab)?;
    let weight = (weight * (1.0 / ((cin * k * k) as f64).sqrt()))?;
    let x = x.broadcast_mul(&styles.reshape((b, cin, 1, 1))?)?;
    let mut y = x.conv2d(&weight, k / 2, 1, 1, 1)?;
    if demodulate {
        let wsq = weight.sqr()?.sum((2, 3))?;
        let coef = (styles.sqr()?.matmul(&wsq.t()?)? + 1e-8)?.sqrt()?.recip()?;
        y = y.broadcast_mul(&coef.reshape((b, cout, 1, 1))?)?;
    }
    Ok(y.broadcast_add(&bias.reshape((1, cout, 1, 1))?)?)
}
