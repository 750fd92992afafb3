//! Detection metrics and the embedding-based diversity score.

use std::collections::BTreeMap;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::embedding::JointEmbedder;
use crate::error::{FactoryError, Result};
use crate::label_synthesis::{BoxLabel, Detection, LabelSet};
use crate::ops;

pub fn iou(a: &BoxLabel, b: &BoxLabel) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassResult {
    pub n_gt: usize,
    /// TP flag per detection in descending-score order.
    pub tp: Vec<bool>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// Only classes with at least one ground-truth box appear.
    pub per_class: BTreeMap<usize, ClassResult>,
}

impl MatchResult {
    pub fn ap(&self, class_id: usize) -> Option<f64> {
        self.per_class.get(&class_id).map(|c| c.ap)
    }

    /// Mean AP over classes that have ground truth; `None` when none do.
    pub fn mean_ap(&self) -> Option<f64> {
        if self.per_class.is_empty() {
            return None;
        }
        Some(self.per_class.values().map(|c| c.ap).sum::<f64>() / self.per_class.len() as f64)
    }
}

/// Per-class AP with greedy score-ordered matching: each detection takes the
/// same-image ground truth of highest IoU; it is a TP if that IoU reaches the
/// threshold and the ground truth is still free, otherwise an FP. AP is the
/// area under the all-point interpolated precision envelope.
pub fn average_precision(preds: &[Vec<Detection>], gts: &[LabelSet], iou_thresh: f64) -> Result<MatchResult> {
    if preds.len() != gts.len() {
        return Err(FactoryError::argument(format!("{} prediction lists for {} images", preds.len(), gts.len())));
    }
    let mut classes: BTreeMap<usize, usize> = BTreeMap::new();
    for g in gts.iter().flatten() {
        *classes.entry(g.class_id).or_default() += 1;
    }
    let mut per_class = BTreeMap::new();
    for (&c, &n_gt) in &classes {
        let mut dets: Vec<(f64, usize, usize)> = preds
            .iter()
            .enumerate()
            .flat_map(|(img, ds)| ds.iter().enumerate().filter(|(_, d)| d.label.class_id == c).map(move |(k, d)| (d.score, img, k)))
            .collect();
        dets.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
        let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
        let mut tp = Vec::with_capacity(dets.len());
        for &(_, img, k) in &dets {
            let d = &preds[img][k].label;
            let best = gts[img]
                .iter()
                .enumerate()
                .filter(|(_, g)| g.class_id == c)
                .map(|(j, g)| (iou(d, g), j))
                .fold(None, |acc: Option<(f64, usize)>, cur| match acc {
                    Some(a) if a.0 >= cur.0 => Some(a),
                    _ => Some(cur),
                });
            let hit = match best {
                Some((o, j)) if o >= iou_thresh && !taken[img][j] => {
                    taken[img][j] = true;
                    true
                }
                _ => false,
            };
            tp.push(hit);
        }
        let mut precision = Vec::with_capacity(tp.len());
        let mut recall = Vec::with_capacity(tp.len());
        let mut hits = 0usize;
        for (k, &t) in tp.iter().enumerate() {
            hits += t as usize;
            precision.push(hits as f64 / (k + 1) as f64);
            recall.push(hits as f64 / n_gt as f64);
        }
        let mut envelope = precision.clone();
        for k in (0..envelope.len().saturating_sub(1)).rev() {
            envelope[k] = envelope[k].max(envelope[k + 1]);
        }
        let mut ap = 0.0;
        for (k, &t) in tp.iter().enumerate() {
            if t {
                ap += envelope[k] / n_gt as f64;
            }
        }
        per_class.insert(c, ClassResult { n_gt, tp, precision, recall, ap });
    }
    Ok(MatchResult { per_class })
}

/// Mean over unordered pairs of `1 - cos(E(a), E(b))`.
pub fn pairwise_diversity(images: &Tensor, embedder: &dyn JointEmbedder) -> Result<f64> {
    let n = images.dim(0)?;
    if n < 2 {
        return Err(FactoryError::argument("diversity needs at least 2 images"));
    }
    let e = embedder.embed_images(&images.detach())?;
    let sims = ops::to_f64_vec(&e.matmul(&e.t()?)?)?;
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += 1.0 - sims[i * n + j];
        }
    }
    Ok(total / (n * (n - 1) / 2) as f64)
}
