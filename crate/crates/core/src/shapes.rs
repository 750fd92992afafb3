//! Procedural "shapes" domains for the desk benchmark.
//!
//! A scene is a deterministic function of a latent vector: up to four objects
//! (squares or discs), one per image quadrant, plus background parameters.
//! The same scene renders in two styles. The source style draws bright gray
//! filled shapes on smooth gray noise; the target style draws saturated shapes
//! of random hue on a pale tinted background. Ground-truth boxes are known exactly.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{FactoryError, Result};
use crate::generator::LatentCode;
use crate::label_synthesis::{BoxLabel, LabelSet};
use crate::ops;
use crate::rng::FactoryRng;

pub const CLASS_NAMES: [&str; 2] = ["square", "disc"];
pub const NUM_CLASSES: usize = 2;
/// Latent coordinates a scene reads; the rest of `z` is free.
pub const SCENE_DIMS: usize = 32;
const SLOTS: usize = 4;
const SLOT_DIMS: usize = 6;

pub const SOURCE_TEXT: &str = "photo of gray shapes";
pub const TARGET_TEXT: &str = "colorful clipart";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Style {
    Source,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneObject {
    pub class_id: usize,
    pub cx: f64,
    pub cy: f64,
    pub half: f64,
    /// Gray level in the source style, hue in the target style.
    pub tone: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub side: usize,
    pub objects: Vec<SceneObject>,
    pub wave: [f64; 4],
    pub tint_hue: f64,
}

fn uniform(z: f64) -> f64 {
    (0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)).clamp(0.0, 1.0)
}

/// Decodes the first [`SCENE_DIMS`] latent coordinates into a scene.
pub fn scene_from_latent(z: &[f64], side: usize) -> Result<Scene> {
    if z.len() < SCENE_DIMS {
        return Err(FactoryError::argument(format!("scene latents need at least {SCENE_DIMS} dims, got {}", z.len())));
    }
    if side < 16 || side % 2 != 0 {
        return Err(FactoryError::argument(format!("scene side {side} must be even and >= 16")));
    }
    let u: Vec<f64> = z[..SCENE_DIMS].iter().map(|&v| uniform(v)).collect();
    let q = side as f64 / 2.0;
    let mut present: Vec<bool> = (0..SLOTS).map(|k| u[k * SLOT_DIMS] < 0.5).collect();
    if !present.iter().any(|&p| p) {
        let k = (0..SLOTS).min_by(|&a, &b| u[a * SLOT_DIMS].total_cmp(&u[b * SLOT_DIMS])).unwrap();
        present[k] = true;
    }
    let mut objects = Vec::new();
    for k in (0..SLOTS).filter(|&k| present[k]) {
        let s = &u[k * SLOT_DIMS..(k + 1) * SLOT_DIMS];
        let half = q * (0.25 + 0.1875 * s[4]);
        let room = q / 2.0 - half;
        let (ox, oy) = ((k % 2) as f64 * q, (k / 2) as f64 * q);
        objects.push(SceneObject {
            class_id: usize::from(s[1] >= 0.5),
            cx: ox + q / 2.0 + (2.0 * s[2] - 1.0) * room,
            cy: oy + q / 2.0 + (2.0 * s[3] - 1.0) * room,
            half,
            tone: s[5],
        });
    }
    let b = &u[SLOTS * SLOT_DIMS..];
    Ok(Scene {
        side,
        objects,
        wave: [2.0 * b[0] - 1.0, b[1], 2.0 * b[2] - 1.0, b[3]],
        tint_hue: b[4],
    })
}

pub fn sample_scene(rng: &mut FactoryRng, side: usize) -> Scene {
    scene_from_latent(&LatentCode::sample(rng, SCENE_DIMS).values, side).expect("valid scene dims")
}

impl Scene {
    pub fn labels(&self) -> LabelSet {
        self.objects
            .iter()
            .map(|o| BoxLabel {
                class_id: o.class_id,
                x_min: o.cx - o.half,
                y_min: o.cy - o.half,
                x_max: o.cx + o.half,
                y_max: o.cy + o.half,
            })
            .collect()
    }

    /// Channel-major RGB pixels in `[-1, 1]`.
    pub fn render(&self, style: Style) -> Vec<f64> {
        let n = self.side;
        let mut img = vec![0.0; 3 * n * n];
        let tint = hsv(self.tint_hue, 1.0, 1.0);
        for y in 0..n {
            for x in 0..n {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut rgb = match style {
                    Style::Source => {
                        let t = std::f64::consts::TAU;
                        let g = 0.3
                            + 0.08 * self.wave[0] * (t * (px / n as f64 + self.wave[1])).cos()
                            + 0.08 * self.wave[2] * (t * (py / n as f64 + self.wave[3])).cos();
                        [g, g, g]
                    }
                    Style::Target => [0.9 + 0.1 * tint[0] - 0.05, 0.9 + 0.1 * tint[1] - 0.05, 0.9 + 0.1 * tint[2] - 0.05],
                };
                for o in &self.objects {
                    let sd = signed_distance(o, px, py);
                    let (cover, color) = match style {
                        Style::Source => {
                            let g = 0.7 + 0.25 * o.tone;
                            (coverage(sd), [g, g, g])
                        }
                        Style::Target => (coverage(sd), hsv(o.tone, 0.85, 0.7)),
                    };
                    if cover > 0.0 {
                        for c in 0..3 {
                            rgb[c] = rgb[c] * (1.0 - cover) + color[c] * cover;
                        }
                    }
                }
                for c in 0..3 {
                    img[(c * n + y) * n + x] = 2.0 * rgb[c] - 1.0;
                }
            }
        }
        img
    }
}

fn signed_distance(o: &SceneObject, px: f64, py: f64) -> f64 {
    let (dx, dy) = (px - o.cx, py - o.cy);
    match o.class_id {
        0 => dx.abs().max(dy.abs()) - o.half,
        _ => (dx * dx + dy * dy).sqrt() - o.half,
    }
}

/// Fraction of a pixel inside an edge at signed distance `sd` (one-pixel ramp).
fn coverage(sd: f64) -> f64 {
    (0.5 - sd).clamp(0.0, 1.0)
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// `[B, 3, S, S]` batch of rendered scenes.
pub fn render_batch(scenes: &[Scene], style: Style, dtype: DType) -> Result<Tensor> {
    let side = scenes.first().map(|s| s.side).ok_or_else(|| FactoryError::argument("no scenes to render"))?;
    let mut flat = Vec::with_capacity(scenes.len() * 3 * side * side);
    for s in scenes {
        if s.side != side {
            return Err(FactoryError::argument("scenes with mixed sizes"));
        }
        flat.extend(s.render(style));
    }
    ops::from_f64(flat, &[scenes.len(), 3, side, side], dtype)
}

pub fn scenes_for_latents(latents: &[LatentCode], side: usize) -> Result<Vec<Scene>> {
    latents.iter().map(|z| scene_from_latent(&z.values, side)).collect()
}
