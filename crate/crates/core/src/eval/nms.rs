//! Score decay among overlapping predictions and top-k selection.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::domain::{iou_1d, Prediction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NmsMethod {
    /// `score · exp(-iou² / sigma)` for overlaps above the threshold.
    Gaussian,
    /// `score · (1 - iou)` for overlaps above the threshold.
    Linear,
    /// Overlaps above the threshold are removed.
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NmsConfig {
    pub method: NmsMethod,
    pub iou_threshold: f64,
    pub sigma: f64,
}

impl Default for NmsConfig {
    fn default() -> Self {
        Self {
            method: NmsMethod::Gaussian,
            iou_threshold: 0.84,
            sigma: 0.5,
        }
    }
}

/// Ranking order: higher score first, then earlier start, earlier end, lower label.
pub fn rank_order(a: &Prediction, b: &Prediction) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.segment.start().total_cmp(&b.segment.start()))
        .then(a.segment.end().total_cmp(&b.segment.end()))
        .then(a.label.cmp(&b.label))
}

/// Soft-NMS over all predictions of one video, returned in rank order.
pub fn soft_nms(preds: &[Prediction], cfg: &NmsConfig) -> Vec<Prediction> {
    soft_nms_limited(preds, cfg, usize::MAX)
}

/// Same as [`soft_nms`] but stops after `limit` predictions have been kept.
/// Later pops never outrank earlier ones, so the result is the prefix of the
/// full output.
pub fn soft_nms_limited(preds: &[Prediction], cfg: &NmsConfig, limit: usize) -> Vec<Prediction> {
    let mut pool: Vec<Prediction> = preds.to_vec();
    let mut kept = Vec::with_capacity(pool.len().min(limit));
    while !pool.is_empty() && kept.len() < limit {
        let mut best = 0;
        for i in 1..pool.len() {
            if rank_order(&pool[i], &pool[best]) == Ordering::Less {
                best = i;
            }
        }
        let top = pool.swap_remove(best);
        pool.retain_mut(|p| {
            let iou = iou_1d(&top.segment, &p.segment);
            if iou <= cfg.iou_threshold {
                return true;
            }
            match cfg.method {
                NmsMethod::Gaussian => p.score *= (-iou * iou / cfg.sigma).exp(),
                NmsMethod::Linear => p.score *= 1.0 - iou,
                NmsMethod::Hard => return false,
            }
            true
        });
        kept.push(top);
    }
    kept
}

/// The `k` highest-ranked predictions, in rank order.
pub fn top_k(preds: &[Prediction], k: usize) -> Vec<Prediction> {
    let mut sorted = preds.to_vec();
    if k < sorted.len() {
        sorted.select_nth_unstable_by(k, rank_order);
        sorted.truncate(k);
    }
    sorted.sort_by(rank_order);
    sorted
}
