//! Joint image/text embedding used by the directional loss and the diversity metric.
//!
//! [`ToyEmbedder`] is a deterministic stand-in for a vision-language model:
//! text maps to a unit vector seeded by a stable hash of the string, images to
//! a fixed random linear projection of their 16x16 downsample. An externally
//! exported model can be plugged in through [`ExternalEmbedder`].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{FactoryError, Result};
use crate::generator::header_usize;
use crate::ops::{self, downsample_to, normalize_rows};
use crate::rng;

pub const WEIGHTS_ENV: &str = "FACTORY_EMBEDDER_WEIGHTS";

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub normalized: bool,
}

impl EmbeddingVector {
    pub fn unit(values: Vec<f64>) -> Self {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Self { values, normalized: false };
        }
        Self {
            values: values.into_iter().map(|v| v / norm).collect(),
            normalized: true,
        }
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn cosine(&self, other: &Self) -> f64 {
        let dot: f64 = self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum();
        let n = self.norm() * other.norm();
        if n == 0.0 {
            0.0
        } else {
            dot / n
        }
    }

    pub fn sub(&self, other: &Self) -> Vec<f64> {
        self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect()
    }
}

pub trait JointEmbedder: Send + Sync {
    fn dim(&self) -> usize;

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector>;

    /// `[B, 3, H, W]` images in `[-1, 1]` to `[B, dim]` unit rows. Differentiable in the pixels.
    fn embed_images(&self, images: &Tensor) -> Result<Tensor>;

    fn embed_image(&self, image: &Tensor) -> Result<EmbeddingVector> {
        let batch = if image.rank() == 3 { image.unsqueeze(0)? } else { image.clone() };
        if batch.dim(0)? != 1 {
            return Err(FactoryError::argument("embed_image takes a single image"));
        }
        let e = self.embed_images(&batch)?;
        Ok(EmbeddingVector {
            values: ops::to_f64_vec(&e)?,
            normalized: true,
        })
    }
}

fn check_pixels(images: &Tensor) -> Result<()> {
    if images.rank() != 4 || images.dim(1)? != 3 {
        return Err(FactoryError::argument(format!("expected [B, 3, H, W] images, got {:?}", images.dims())));
    }
    let total = ops::scalar(&images.detach().to_dtype(DType::F64)?.abs()?.sum_all()?)?;
    if !total.is_finite() {
        return Err(FactoryError::argument("image contains non-finite pixels"));
    }
    Ok(())
}

/// Linear image encoder `normalize(P · vec(downsample(x)) + b)`.
struct LinearImageEncoder {
    side: usize,
    dim: usize,
    proj: Vec<f64>,
    bias: Vec<f64>,
}

impl LinearImageEncoder {
    fn encode(&self, images: &Tensor) -> Result<Tensor> {
        check_pixels(images)?;
        let dtype = images.dtype();
        let b = images.dim(0)?;
        let small = downsample_to(images, self.side)?.reshape((b, 3 * self.side * self.side))?;
        let p = ops::from_f64(self.proj.clone(), &[self.dim, 3 * self.side * self.side], dtype)?;
        let bias = ops::from_f64(self.bias.clone(), &[1, self.dim], dtype)?;
        let e = small.matmul(&p.t()?)?.broadcast_add(&bias)?;
        normalize_rows(&e)
    }
}

pub struct ToyEmbedder {
    seed: u64,
    image: LinearImageEncoder,
    texts: BTreeMap<String, Vec<f64>>,
}

impl ToyEmbedder {
    pub const SIDE: usize = 16;

    pub fn new(dim: usize, seed: u64) -> Self {
        let inputs = 3 * Self::SIDE * Self::SIDE;
        let mut r = rng::rng_from_seed(rng::derive_seed(seed, "toy-embedder-image"));
        let scale = 1.0 / (inputs as f64).sqrt();
        let proj = rng::normal_vec(&mut r, dim * inputs).into_iter().map(|v| v * scale).collect();
        let bias = rng::normal_vec(&mut r, dim).into_iter().map(|v| v * 0.1).collect();
        Self {
            seed,
            image: LinearImageEncoder {
                side: Self::SIDE,
                dim,
                proj,
                bias,
            },
            texts: BTreeMap::new(),
        }
    }

    /// Overrides the hashed text vectors for the given prompts.
    pub fn with_texts(mut self, texts: BTreeMap<String, Vec<f64>>) -> Self {
        self.texts.extend(texts);
        self
    }
}

impl JointEmbedder for ToyEmbedder {
    fn dim(&self) -> usize {
        self.image.dim
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector> {
        if text.is_empty() {
            return Err(FactoryError::argument("cannot embed empty text"));
        }
        if let Some(v) = self.texts.get(text) {
            return Ok(EmbeddingVector::unit(v.clone()));
        }
        let seed = rng::stable_hash64(text.as_bytes()) ^ self.seed.rotate_left(17);
        let mut r = rng::rng_from_seed(seed);
        Ok(EmbeddingVector::unit(rng::normal_vec(&mut r, self.image.dim)))
    }

    fn embed_images(&self, images: &Tensor) -> Result<Tensor> {
        self.image.encode(images)
    }
}

/// Embedder exported from an external vision-language model.
///
/// The weights file uses the checkpoint container with header
/// `{"kind": "embedder", "dim": d, "input_side": s, "texts": {"photo": [...], ...}}`
/// and tensors `image.proj` (`[d, 3*s*s]`) and `image.bias` (`[d]`): a linear
/// probe on the model's image tower plus precomputed text embeddings for the
/// prompts a run uses.
pub struct ExternalEmbedder {
    image: LinearImageEncoder,
    texts: BTreeMap<String, Vec<f64>>,
}

impl ExternalEmbedder {
    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let h = &ck.header;
        if h.get("kind").and_then(|k| k.as_str()) != Some("embedder") {
            return Err(FactoryError::format(path, "not an embedder weights file"));
        }
        let dim = header_usize(h, "dim")?;
        let side = header_usize(h, "input_side")?;
        let texts: BTreeMap<String, Vec<f64>> = serde_json::from_value(h.get("texts").cloned().unwrap_or_default())
            .map_err(|e| FactoryError::format(path, format!("texts: {e}")))?;
        let get = |name: &str, len: usize| -> Result<Vec<f64>> {
            let t = ck.get(name).ok_or_else(|| FactoryError::format(path, format!("missing tensor `{name}`")))?;
            if t.data.len() != len {
                return Err(FactoryError::format(path, format!("`{name}` has {} values, expected {len}", t.data.len())));
            }
            Ok(t.data.to_f64())
        };
        let proj = get("image.proj", dim * 3 * side * side)?;
        let bias = get("image.bias", dim)?;
        if let Some((k, _)) = texts.iter().find(|(_, v)| v.len() != dim) {
            return Err(FactoryError::format(path, format!("text embedding `{k}` has wrong dimension")));
        }
        Ok(Self {
            image: LinearImageEncoder { side, dim, proj, bias },
            texts,
        })
    }
}

impl JointEmbedder for ExternalEmbedder {
    fn dim(&self) -> usize {
        self.image.dim
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector> {
        if text.is_empty() {
            return Err(FactoryError::argument("cannot embed empty text"));
        }
        let v = self
            .texts
            .get(text)
            .ok_or_else(|| FactoryError::argument(format!("external embedder has no embedding for `{text}`")))?;
        Ok(EmbeddingVector::unit(v.clone()))
    }

    fn embed_images(&self, images: &Tensor) -> Result<Tensor> {
        self.image.encode(images)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedderKind {
    Toy,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderConfig {
    pub kind: EmbedderKind,
    pub dim: usize,
    pub seed: u64,
    pub weights_path: Option<PathBuf>,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            kind: EmbedderKind::Toy,
            dim: 64,
            seed: 0x5eed,
            weights_path: None,
        }
    }
}

impl EmbedderConfig {
    pub fn build(&self) -> Result<Box<dyn JointEmbedder>> {
        match self.kind {
            EmbedderKind::Toy => Ok(Box::new(ToyEmbedder::new(self.dim, self.seed))),
            EmbedderKind::External => {
                let path = self
                    .weights_path
                    .clone()
                    .or_else(|| std::env::var_os(WEIGHTS_ENV).map(PathBuf::from))
                    .ok_or_else(|| FactoryError::config(format!("embedder.kind = external needs embedder.weights_path or ${WEIGHTS_ENV}")))?;
                Ok(Box::new(ExternalEmbedder::load(&path)?))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::{NamedTensor, TensorData};
    use candle_core::{Device, Var};

    fn image(seed: u64, side: usize) -> Tensor {
        let mut r = rng::rng_from_seed(seed);
        let v: Vec<f64> = rng::normal_vec(&mut r, 3 * side * side).into_iter().map(|x| (x * 0.4).tanh()).collect();
        Tensor::from_vec(v, (1, 3, side, side), &Device::Cpu).unwrap()
    }

    #[test]
    fn text_embedding_is_deterministic_and_unit() {
        let e = ToyEmbedder::new(64, 1);
        let a = e.embed_text("photo").unwrap();
        assert_eq!(a, e.embed_text("photo").unwrap());
        assert!((a.norm() - 1.0).abs() < 1e-6);
        assert!(e.embed_text("").is_err());
        // a fresh instance built from the same seed agrees (process-restart determinism)
        assert_eq!(a, ToyEmbedder::new(64, 1).embed_text("photo").unwrap());
    }

    #[test]
    fn hundred_words_do_not_collide() {
        let e = ToyEmbedder::new(64, 1);
        let words: Vec<String> = ["photo", "comic", "clipart", "watercolor", "sketch", "outline drawing"]
            .iter()
            .map(|s| s.to_string())
            .chain((0..94).map(|i| format!("word{i}")))
            .collect();
        let embs: Vec<_> = words.iter().map(|w| e.embed_text(w).unwrap()).collect();
        assert!(embs[0].cosine(&embs[1]) < 0.99);
        for i in 0..embs.len() {
            for j in i + 1..embs.len() {
                assert!(embs[i].cosine(&embs[j]) < 0.99, "{} vs {}", words[i], words[j]);
            }
        }
    }

    #[test]
    fn image_embedding_is_unit_and_deterministic() {
        let e = ToyEmbedder::new(32, 2);
        for side in [16, 32, 64, 20] {
            let x = image(side as u64, side);
            let a = e.embed_image(&x).unwrap();
            assert!((a.norm() - 1.0).abs() < 1e-6, "side {side}");
            assert_eq!(a, e.embed_image(&x).unwrap());
        }
    }

    #[test]
    fn non_finite_pixels_rejected() {
        let e = ToyEmbedder::new(8, 0);
        let mut v = vec![0.0f64; 3 * 16 * 16];
        v[5] = f64::NAN;
        let x = Tensor::from_vec(v, (1, 3, 16, 16), &Device::Cpu).unwrap();
        assert!(matches!(e.embed_image(&x), Err(FactoryError::Argument(_))));
    }

    /// Gradient of `<u, E(x)>` w.r.t. pixels against central differences.
    #[test]
    fn image_embedding_gradient_matches_finite_differences() {
        let e = ToyEmbedder::new(16, 3);
        let x0 = image(7, 32);
        let x = Var::from_tensor(&x0).unwrap();
        let u: Vec<f64> = (0..16).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.3).collect();
        let ut = Tensor::from_vec(u.clone(), (16, 1), &Device::Cpu).unwrap();
        let f = |t: &Tensor| -> Tensor { e.embed_images(t).unwrap().matmul(&ut).unwrap().sum_all().unwrap() };
        let grads = f(x.as_tensor()).backward().unwrap();
        let g = ops::to_f64_vec(grads.get(x.as_tensor()).unwrap()).unwrap();
        let base = ops::to_f64_vec(&x0).unwrap();
        let h = 1e-3;
        for idx in [0usize, 17, 300, 1023, 2047, 3071] {
            let mut p = base.clone();
            p[idx] += h;
            let mut m = base.clone();
            m[idx] -= h;
            let fp = ops::scalar(&f(&Tensor::from_vec(p, (1, 3, 32, 32), &Device::Cpu).unwrap())).unwrap();
            let fm = ops::scalar(&f(&Tensor::from_vec(m, (1, 3, 32, 32), &Device::Cpu).unwrap())).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            let rel = (g[idx] - fd).abs() / fd.abs().max(g[idx].abs()).max(1e-8);
            assert!(rel < 1e-4, "pixel {idx}: analytic {} vs fd {fd} (rel {rel})", g[idx]);
        }
    }

    #[test]
    fn external_embedder_loads_and_matches_contract() {
        let dim = 4;
        let side = 2;
        let proj: Vec<f64> = (0..dim * 3 * side * side).map(|i| (i as f64 * 0.37).sin()).collect();
        let ck = Checkpoint {
            header: serde_json::json!({"kind": "embedder", "dim": dim, "input_side": side, "texts": {"photo": [1.0, 0.0, 0.0, 0.0], "comic": [0.0, 2.0, 0.0, 0.0]}}),
            tensors: vec![
                NamedTensor { name: "image.proj".into(), dims: vec![dim, 3 * side * side], data: TensorData::F64(proj) },
                NamedTensor { name: "image.bias".into(), dims: vec![dim], data: TensorData::F64(vec![0.1; dim]) },
            ],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.ckpt");
        ck.save(&path).unwrap();
        let cfg = EmbedderConfig { kind: EmbedderKind::External, weights_path: Some(path), ..Default::default() };
        let e = cfg.build().unwrap();
        assert_eq!(e.embed_text("comic").unwrap().values, vec![0.0, 1.0, 0.0, 0.0]);
        assert!(e.embed_text("sketch").is_err());
        let v = e.embed_image(&image(1, 8)).unwrap();
        assert!((v.norm() - 1.0).abs() < 1e-6);

        let missing = EmbedderConfig { kind: EmbedderKind::External, weights_path: Some(dir.path().join("nope")), ..Default::default() };
        assert!(missing.build().is_err());
    }
}
