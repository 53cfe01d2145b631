//! Average precision, mAP over an IoU grid, and average recall.

use serde::{Deserialize, Serialize};

use super::nms::rank_order;
use crate::domain::{iou_1d, AnnotationSet, Prediction, PredictionSet};
use crate::error::{Error, Result};

/// `[0.5, 0.55, ..., 0.95]`
pub fn iou_grid() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

pub const AR_KS: [usize; 4] = [1, 5, 10, 100];

/// Predictions of one video in rank order.
fn ranked(preds: &[Prediction]) -> Vec<Prediction> {
    let mut v = preds.to_vec();
    v.sort_by(rank_order);
    v
}

/// AP of one class at one IoU threshold. `None` when the class has no
/// ground-truth instance.
pub fn average_precision(preds: &PredictionSet, gts: &AnnotationSet, class: usize, iou_thr: f64) -> Option<f64> {
    let npos: usize = gts
        .videos
        .values()
        .map(|v| v.instances.iter().filter(|i| i.label == class).count())
        .sum();
    if npos == 0 {
        return None;
    }
    // (video, prediction) in global rank order; the stable sort keeps video
    // order for exact ties
    let mut cands: Vec<(&str, Prediction)> = Vec::new();
    for (id, vp) in &preds.videos {
        for p in ranked(&vp.predictions) {
            if p.label == class {
                cands.push((id.as_str(), p));
            }
        }
    }
    cands.sort_by(|a, b| rank_order(&a.1, &b.1));

    let mut matched: std::collections::BTreeMap<&str, Vec<bool>> = gts
        .videos
        .iter()
        .map(|(id, v)| (id.as_str(), vec![false; v.instances.len()]))
        .collect();
    let mut tp = 0usize;
    let mut ap = 0.0;
    for (rank, (id, p)) in cands.iter().enumerate() {
        let Some(video) = gts.videos.get(*id) else {
            continue;
        };
        let used = matched.get_mut(id).expect("same keys as gts");
        let mut best: Option<(usize, f64)> = None;
        for (g, inst) in video.instances.iter().enumerate() {
            if inst.label != class || used[g] {
                continue;
            }
            let iou = iou_1d(&p.segment, &inst.segment);
            if iou >= iou_thr && best.map_or(true, |(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            used[g] = true;
            tp += 1;
            // recall rises by 1/npos at this rank, precision is tp/(rank+1)
            ap += (tp as f64 / (rank + 1) as f64) / npos as f64;
        }
    }
    Some(ap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub label: usize,
    pub name: String,
    /// One entry per threshold; `null` when the class has no ground truth.
    pub ap: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallPoint {
    pub k: usize,
    pub ar: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub thresholds: Vec<f64>,
    pub map: Vec<f64>,
    pub average_map: f64,
    pub per_class: Vec<ClassAp>,
    pub ar: Vec<RecallPoint>,
    pub auc: f64,
}

impl MetricReport {
    pub fn map_at(&self, thr: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .position(|t| (t - thr).abs() < 1e-9)
            .map(|i| self.map[i])
    }

    /// `[mAP@0.5, mAP@0.75, mAP@0.95, average]`; missing thresholds are NaN.
    pub fn columns(&self) -> [f64; 4] {
        [
            self.map_at(0.5).unwrap_or(f64::NAN),
            self.map_at(0.75).unwrap_or(f64::NAN),
            self.map_at(0.95).unwrap_or(f64::NAN),
            self.average_map,
        ]
    }
}

/// The mAP part of a [`MetricReport`]: per-threshold mAP, the average and the per-class table.
pub struct MapPart {
    pub thresholds: Vec<f64>,
    pub map: Vec<f64>,
    pub average_map: f64,
    pub per_class: Vec<ClassAp>,
}

pub fn map_report(preds: &PredictionSet, gts: &AnnotationSet, thresholds: &[f64]) -> Result<MapPart> {
    if gts.num_instances() == 0 {
        return Err(Error::EmptyGroundTruth);
    }
    if thresholds.is_empty() {
        return Err(Error::InvalidArgument("empty IoU threshold grid".into()));
    }
    preds.check_against(gts)?;
    let per_class: Vec<ClassAp> = gts
        .classes
        .iter()
        .enumerate()
        .map(|(label, name)| ClassAp {
            label,
            name: name.clone(),
            ap: thresholds
                .iter()
                .map(|&t| average_precision(preds, gts, label, t))
                .collect(),
        })
        .collect();
    let map: Vec<f64> = (0..thresholds.len())
        .map(|ti| {
            let aps: Vec<f64> = per_class.iter().filter_map(|c| c.ap[ti]).collect();
            aps.iter().sum::<f64>() / aps.len() as f64
        })
        .collect();
    let average_map = map.iter().sum::<f64>() / map.len() as f64;
    Ok(MapPart {
        thresholds: thresholds.to_vec(),
        map,
        average_map,
        per_class,
    })
}

/// Class-agnostic average recall of the top-k proposals per video.
pub struct RecallPart {
    pub ar: Vec<RecallPoint>,
    pub auc: f64,
}

/// Average recall at each `k`, and the area under AR(k) for k in 0..=100
/// with AR(0) = 0 (trapezoid rule, so the area lies in [0, 100]).
pub fn ar_auc(preds: &PredictionSet, gts: &AnnotationSet, ks: &[usize]) -> Result<RecallPart> {
    if gts.num_instances() == 0 {
        return Err(Error::EmptyGroundTruth);
    }
    preds.check_against(gts)?;
    let grid = iou_grid();
    let curve = recall_curve(preds, gts, &grid, ks.iter().copied().max().unwrap_or(0).max(100));
    let ar = ks.iter().map(|&k| RecallPoint { k, ar: curve[k] }).collect();
    let auc = (1..=100).map(|k| 0.5 * (curve[k - 1] + curve[k])).sum();
    Ok(RecallPart { ar, auc })
}

/// AR(k) for k in 0..=max_k.
fn recall_curve(preds: &PredictionSet, gts: &AnnotationSet, grid: &[f64], max_k: usize) -> Vec<f64> {
    // hits[k] counts (instance, threshold) pairs first recalled by the proposal at rank k
    let mut hits = vec![0usize; max_k + 1];
    let total = gts.num_instances() * grid.len();
    for (id, video) in &gts.videos {
        let props = preds.videos.get(id).map(|v| ranked(&v.predictions)).unwrap_or_default();
        for inst in &video.instances {
            for &thr in grid {
                if let Some(r) = props.iter().position(|p| iou_1d(&p.segment, &inst.segment) >= thr) {
                    if r < max_k {
                        hits[r] += 1;
                    }
                }
            }
        }
    }
    let mut curve = vec![0.0; max_k + 1];
    let mut acc = 0usize;
    for k in 1..=max_k {
        acc += hits[k - 1];
        curve[k] = acc as f64 / total as f64;
    }
    curve
}

pub fn metric_report(preds: &PredictionSet, gts: &AnnotationSet, thresholds: &[f64]) -> Result<MetricReport> {
    let m = map_report(preds, gts, thresholds)?;
    let r = ar_auc(preds, gts, &AR_KS)?;
    Ok(MetricReport {
        thresholds: m.thresholds,
        map: m.map,
        average_map: m.average_map,
        per_class: m.per_class,
        ar: r.ar,
        auc: r.auc,
    })
}
