//! Image-level and patch-level discriminators sharing one convolutional trunk.
//!
//! The trunk is `from_rgb` (1x1) followed by one `3x3 conv -> lrelu -> 2x avg-pool`
//! block per resolution level, mirroring the generator (`side -> 4`). The image
//! head is a linear layer over the final 4x4 activation; the patch head is a
//! 1x1 convolution over the activation after block `patch_tap_layer`, so both
//! heads read the very same trunk tensors.
//!
//! Layer ids: 1 = `from_rgb`, `2..=K+1` = trunk blocks, `K+2` = both heads.

use std::collections::BTreeSet;
use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{FactoryError, Result};
use crate::generator::header_usize;
use crate::ops::leaky_relu;
use crate::params::{ParamStore, Tracking};
use crate::rng;

const LRELU_SLOPE: f64 = 0.2;
const LRELU_GAIN: f64 = std::f64::consts::SQRT_2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    pub image_side: usize,
    /// Output width of each trunk block (input side / 2^k after block k); `from_rgb`
    /// produces `channels[0]`.
    pub channels: Vec<usize>,
    /// Trunk block whose output feeds the patch head (1-based).
    pub patch_tap_layer: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            image_side: 128,
            channels: vec![8, 16, 32, 32, 32, 32],
            patch_tap_layer: 3,
        }
    }
}

impl DiscriminatorConfig {
    /// One block per halving from `image_side` down to 4.
    pub fn num_blocks(&self) -> usize {
        (self.image_side / 4).trailing_zeros() as usize
    }

    pub fn patch_grid_side(&self) -> usize {
        self.image_side >> self.patch_tap_layer
    }

    pub fn validate(&self) -> Result<()> {
        if !self.image_side.is_power_of_two() || self.image_side < 8 {
            return Err(FactoryError::config("discriminator.image_side must be a power of two >= 8"));
        }
        if self.channels.len() != self.num_blocks() {
            return Err(FactoryError::config(format!(
                "discriminator.channels needs {} entries for side {}",
                self.num_blocks(),
                self.image_side
            )));
        }
        if self.patch_tap_layer == 0 || self.patch_tap_layer > self.num_blocks() {
            return Err(FactoryError::config("discriminator.patch_tap_layer outside trunk"));
        }
        Ok(())
    }

    /// Receptive field of one patch logit: `(size, jump, start)` in input pixels,
    /// where the logit at grid index `i` is centred at `start + i * jump`.
    pub fn patch_receptive_field(&self) -> (f64, f64, f64) {
        // (kernel, stride, padding) of every spatial op up to the tap.
        let mut size = 1.0;
        let mut jump = 1.0;
        let mut start = 0.5;
        for _ in 0..self.patch_tap_layer {
            for (k, s, p) in [(3.0, 1.0, 1.0), (2.0, 2.0, 0.0)] {
                size += (k - 1.0) * jump;
                start += ((k - 1.0) / 2.0 - p) * jump;
                jump *= s;
            }
        }
        (size, jump, start)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DiscriminatorMode {
    ImageLevel,
    PatchLevel,
}

pub struct Discriminator {
    config: DiscriminatorConfig,
    store: ParamStore,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::rng_from_seed(rng::derive_seed(seed, "discriminator-init"));
        let mut store = ParamStore::new(dtype);
        let c0 = config.channels[0];
        store.add("from_rgb.weight", 1, &[c0, 3, 1, 1], rng::normal_vec(&mut rng, c0 * 3))?;
        store.add("from_rgb.bias", 1, &[c0], vec![0.0; c0])?;
        let mut cin = c0;
        for (i, &cout) in config.channels.iter().enumerate() {
            let layer = i + 2;
            store.add(&format!("block{}.weight", i + 1), layer, &[cout, cin, 3, 3], rng::normal_vec(&mut rng, cout * cin * 9))?;
            store.add(&format!("block{}.bias", i + 1), layer, &[cout], vec![0.0; cout])?;
            cin = cout;
        }
        let head = config.num_blocks() + 2;
        let last = *config.channels.last().unwrap();
        store.add("image_head.weight", head, &[1, last * 16], rng::normal_vec(&mut rng, last * 16))?;
        store.add("image_head.bias", head, &[1], vec![0.0])?;
        let tap_c = config.channels[config.patch_tap_layer - 1];
        store.add("patch_head.weight", head, &[1, tap_c, 1, 1], rng::normal_vec(&mut rng, tap_c))?;
        store.add("patch_head.bias", head, &[1], vec![0.0])?;
        store.set_trainable(store.layers());
        Ok(Self { config, store })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn final_layer(&self) -> usize {
        self.config.num_blocks() + 2
    }

    pub fn trunk_layers(&self) -> BTreeSet<usize> {
        (1..self.final_layer()).collect()
    }

    pub fn freeze_all_but_final(&mut self) {
        self.store.set_trainable([self.final_layer()].into());
    }

    pub fn unfreeze_all(&mut self) {
        self.store.set_trainable(self.store.layers());
    }

    pub fn trainable_vars(&self) -> Vec<candle_core::Var> {
        self.store.trainable_vars()
    }

    fn check_input(&self, images: &Tensor) -> Result<()> {
        let (_, c, h, w) = images.dims4()?;
        let side = self.config.image_side;
        if c != 3 || h != side || w != side {
            return Err(FactoryError::argument(format!(
                "discriminator expects [B, 3, {side}, {side}] images, got {:?}",
                images.dims()
            )));
        }
        Ok(())
    }

    /// Runs the trunk, returning the patch-tap activation and the final 4x4 activation.
    fn trunk(&self, images: &Tensor, tracking: Tracking) -> Result<(Tensor, Tensor)> {
        self.check_input(images)?;
        let s = &self.store;
        let x = images.to_dtype(s.dtype())?;
        let w = s.get("from_rgb.weight", tracking)?;
        let mut x = x.conv2d(&(w * (1.0 / 3f64.sqrt()))?, 0, 1, 1, 1)?.broadcast_add(&s.get("from_rgb.bias", tracking)?.reshape((1, (), 1, 1))?)?;
        x = (leaky_relu(&x, LRELU_SLOPE)? * LRELU_GAIN)?;
        let mut tap = None;
        for i in 1..=self.config.num_blocks() {
            let w = s.get(&format!("block{i}.weight"), tracking)?;
            let fan_in = (w.dim(1)? * 9) as f64;
            x = x.conv2d(&(w * (1.0 / fan_in.sqrt()))?, 1, 1, 1, 1)?;
            x = x.broadcast_add(&s.get(&format!("block{i}.bias"), tracking)?.reshape((1, (), 1, 1))?)?;
            x = (leaky_relu(&x, LRELU_SLOPE)? * LRELU_GAIN)?;
            x = x.avg_pool2d(2)?;
            if i == self.config.patch_tap_layer {
                tap = Some(x.clone());
            }
        }
        Ok((tap.expect("tap layer validated"), x))
    }

    fn image_head(&self, last: &Tensor, tracking: Tracking) -> Result<Tensor> {
        let w = self.store.get("image_head.weight", tracking)?;
        let b = self.store.get("image_head.bias", tracking)?;
        let flat = last.flatten_from(1)?;
        let scale = 1.0 / (w.dim(1)? as f64).sqrt();
        Ok(flat.matmul(&(w.t()? * scale)?)?.broadcast_add(&b)?.squeeze(1)?)
    }

    fn patch_head(&self, tap: &Tensor, tracking: Tracking) -> Result<Tensor> {
        let w = self.store.get("patch_head.weight", tracking)?;
        let b = self.store.get("patch_head.bias", tracking)?;
        let scale = 1.0 / (w.dim(1)? as f64).sqrt();
        let y = tap.conv2d(&(w * scale)?, 0, 1, 1, 1)?.broadcast_add(&b.reshape((1, 1, 1, 1))?)?;
        Ok(y.squeeze(1)?)
    }

    /// One logit per image: `[B]`.
    pub fn score_full(&self, images: &Tensor, tracking: Tracking) -> Result<Tensor> {
        let (_, last) = self.trunk(images, tracking)?;
        self.image_head(&last, tracking)
    }

    /// Grid of patch logits: `[B, h_p, w_p]`.
    pub fn score_patches(&self, images: &Tensor, tracking: Tracking) -> Result<Tensor> {
        let (tap, _) = self.trunk(images, tracking)?;
        self.patch_head(&tap, tracking)
    }

    /// Logits for the given mode, flattened to `[B, n]` (`n = 1` for image level).
    pub fn score(&self, images: &Tensor, mode: DiscriminatorMode, tracking: Tracking) -> Result<Tensor> {
        match mode {
            DiscriminatorMode::ImageLevel => Ok(self.score_full(images, tracking)?.unsqueeze(1)?),
            DiscriminatorMode::PatchLevel => Ok(self.score_patches(images, tracking)?.flatten_from(1)?),
        }
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            header: serde_json::json!({
                "kind": "discriminator",
                "image_side": self.config.image_side,
                "channels": self.config.channels,
                "patch_tap_layer": self.config.patch_tap_layer,
            }),
            tensors: self.store.to_named_tensors()?,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint, dtype: DType) -> Result<Self> {
        let h = &ck.header;
        if h.get("kind").and_then(|k| k.as_str()) != Some("discriminator") {
            return Err(FactoryError::config("checkpoint is not a discriminator"));
        }
        let config = DiscriminatorConfig {
            image_side: header_usize(h, "image_side")?,
            channels: serde_json::from_value(h["channels"].clone())?,
            patch_tap_layer: header_usize(h, "patch_tap_layer")?,
        };
        let d = Self::new(config, dtype, 0)?;
        d.store.load_named(&ck.tensors)?;
        Ok(d)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path, dtype: DType) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, dtype)
    }
}
