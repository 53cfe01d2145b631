//! Brute-force reference implementations and random fixtures for the metric
//! and suppression code. Written from the definitions, without reusing the
//! library's ranking or matching helpers.

#![allow(dead_code)]

use std::cmp::Ordering;

use lofi_core::domain::{ActionInstance, AnnotationSet, Prediction, PredictionSet, Segment, VideoAnnotation, VideoPredictions};
use lofi_core::eval::{NmsConfig, NmsMethod};
use rand::Rng;

pub fn iou(a: &Segment, b: &Segment) -> f64 {
    let lo = a.start().max(b.start());
    let hi = a.end().min(b.end());
    if hi <= lo {
        return 0.0;
    }
    let inter = hi - lo;
    inter / (a.length() + b.length() - inter)
}

/// Score descending, then start, end and label ascending.
pub fn key_cmp(a: &Prediction, b: &Prediction) -> Ordering {
    let ka = (-a.score, a.segment.start(), a.segment.end());
    let kb = (-b.score, b.segment.start(), b.segment.end());
    ka.partial_cmp(&kb).unwrap().then(a.label.cmp(&b.label))
}

fn sorted(preds: &[Prediction]) -> Vec<Prediction> {
    let mut v = preds.to_vec();
    v.sort_by(key_cmp);
    v
}

/// Non-interpolated AP from cumulative TP/FP counts: sum of precision at
/// every rank where recall increases.
pub fn ap_oracle(preds: &PredictionSet, gts: &AnnotationSet, class: usize, thr: f64) -> Option<f64> {
    let npos = gts
        .videos
        .values()
        .flat_map(|v| &v.instances)
        .filter(|i| i.label == class)
        .count();
    if npos == 0 {
        return None;
    }
    let mut dets: Vec<(String, Prediction)> = Vec::new();
    for (id, vp) in &preds.videos {
        for p in &vp.predictions {
            if p.label == class {
                dets.push((id.clone(), *p));
            }
        }
    }
    dets.sort_by(|a, b| key_cmp(&a.1, &b.1).then(a.0.cmp(&b.0)));
    let mut taken: Vec<(String, usize)> = Vec::new();
    let mut tp = vec![0.0; dets.len()];
    let mut fp = vec![0.0; dets.len()];
    for (r, (id, p)) in dets.iter().enumerate() {
        let mut best = None;
        let mut best_iou = -1.0;
        if let Some(v) = gts.videos.get(id) {
            for (g, inst) in v.instances.iter().enumerate() {
                if inst.label != class || taken.contains(&(id.clone(), g)) {
                    continue;
                }
                let o = iou(&p.segment, &inst.segment);
                if o >= thr && o > best_iou {
                    best_iou = o;
                    best = Some(g);
                }
            }
        }
        match best {
            Some(g) => {
                taken.push((id.clone(), g));
                tp[r] = 1.0;
            }
            None => fp[r] = 1.0,
        }
    }
    let mut ctp = 0.0;
    let mut cfp = 0.0;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for r in 0..dets.len() {
        ctp += tp[r];
        cfp += fp[r];
        let recall = ctp / npos as f64;
        let precision = ctp / (ctp + cfp);
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Some(ap)
}

/// Per-threshold mAP over classes that have ground truth, and their mean.
pub fn map_oracle(preds: &PredictionSet, gts: &AnnotationSet, thresholds: &[f64]) -> (Vec<f64>, f64) {
    let mut maps = Vec::new();
    for &t in thresholds {
        let aps: Vec<f64> = (0..gts.classes.len()).filter_map(|c| ap_oracle(preds, gts, c, t)).collect();
        maps.push(aps.iter().sum::<f64>() / aps.len() as f64);
    }
    let avg = maps.iter().sum::<f64>() / maps.len() as f64;
    (maps, avg)
}

/// AR(k) with the top-k class-agnostic proposals of each video, by direct
/// recount for every k.
pub fn ar_oracle(preds: &PredictionSet, gts: &AnnotationSet, k: usize) -> f64 {
    let grid: Vec<f64> = (50..=95).step_by(5).map(|p| p as f64 / 100.0).collect();
    let mut hit = 0usize;
    let mut total = 0usize;
    for (id, v) in &gts.videos {
        let props: Vec<Prediction> = preds
            .videos
            .get(id)
            .map(|vp| sorted(&vp.predictions).into_iter().take(k).collect())
            .unwrap_or_default();
        for inst in &v.instances {
            for &t in &grid {
                total += 1;
                if props.iter().any(|p| iou(&p.segment, &inst.segment) >= t) {
                    hit += 1;
                }
            }
        }
    }
    hit as f64 / total as f64
}

/// Trapezoid area under AR(k) for k = 0..=100 with AR(0) = 0.
pub fn auc_oracle(preds: &PredictionSet, gts: &AnnotationSet) -> f64 {
    let curve: Vec<f64> = (0..=100).map(|k| if k == 0 { 0.0 } else { ar_oracle(preds, gts, k) }).collect();
    curve.windows(2).map(|w| (w[0] + w[1]) / 2.0).sum()
}

/// Soft-NMS by re-sorting the remaining pool on every round.
pub fn soft_nms_oracle(preds: &[Prediction], cfg: &NmsConfig) -> Vec<Prediction> {
    let mut pool = preds.to_vec();
    let mut out = Vec::new();
    while !pool.is_empty() {
        pool.sort_by(key_cmp);
        let top = pool.remove(0);
        let mut rest = Vec::new();
        for mut p in pool {
            let o = iou(&top.segment, &p.segment);
            if o > cfg.iou_threshold {
                match cfg.method {
                    NmsMethod::Gaussian => p.score *= (-(o * o) / cfg.sigma).exp(),
                    NmsMethod::Linear => p.score *= 1.0 - o,
                    NmsMethod::Hard => continue,
                }
            }
            rest.push(p);
        }
        pool = rest;
        out.push(top);
    }
    out
}

pub fn top_k_oracle(preds: &[Prediction], k: usize) -> Vec<Prediction> {
    sorted(preds).into_iter().take(k).collect()
}

pub const CLASSES: usize = 3;

fn random_segment(rng: &mut impl Rng) -> Segment {
    // half-second grid so exact ties and exact threshold hits occur
    let s = rng.gen_range(0..36) as f64 * 0.5;
    let len = rng.gen_range(1..12) as f64 * 0.5;
    Segment::new(s, s + len).unwrap()
}

/// Up to 5 videos, up to 5 ground-truth instances per video (at least one
/// overall) and up to 20 predictions in total. Scores sit on a coarse grid so
/// ties are common.
pub fn random_instance(rng: &mut impl Rng) -> (PredictionSet, AnnotationSet) {
    let classes: Vec<String> = (0..CLASSES).map(|c| format!("c{c}")).collect();
    let mut gts = AnnotationSet::new(classes.clone(), 25.0);
    let mut preds = PredictionSet::new(classes, 25.0);
    let nv = rng.gen_range(1..=5);
    for v in 0..nv {
        let id = format!("v{v}");
        let instances = (0..rng.gen_range(0..=5))
            .map(|_| ActionInstance {
                segment: random_segment(rng),
                label: rng.gen_range(0..CLASSES),
            })
            .collect();
        gts.videos.insert(id.clone(), VideoAnnotation { duration: 25.0, instances });
        preds.videos.insert(id, VideoPredictions { duration: 25.0, predictions: Vec::new() });
    }
    if gts.num_instances() == 0 {
        let v = gts.videos.get_mut("v0").unwrap();
        v.instances.push(ActionInstance {
            segment: random_segment(rng),
            label: 0,
        });
    }
    let np = rng.gen_range(0..=20);
    for _ in 0..np {
        let v = rng.gen_range(0..nv);
        let p = if rng.gen_bool(0.4) {
            // near-copy of a ground-truth instance of the same video
            let g = &gts.videos[&format!("v{v}")].instances;
            if g.is_empty() {
                None
            } else {
                let inst = g[rng.gen_range(0..g.len())];
                let jitter = rng.gen_range(-2..=2) as f64 * 0.25;
                let s = (inst.segment.start() + jitter).max(0.0);
                let e = (inst.segment.end() + rng.gen_range(-2..=2) as f64 * 0.25).max(s + 0.25);
                Some(Prediction {
                    segment: Segment::new(s, e).unwrap(),
                    label: if rng.gen_bool(0.8) { inst.label } else { rng.gen_range(0..CLASSES) },
                    score: rng.gen_range(1..=10) as f64 / 10.0,
                })
            }
        } else {
            None
        };
        let p = p.unwrap_or_else(|| Prediction {
            segment: random_segment(rng),
            label: rng.gen_range(0..CLASSES),
            score: rng.gen_range(1..=10) as f64 / 10.0,
        });
        preds.videos.get_mut(&format!("v{v}")).unwrap().predictions.push(p);
    }
    (preds, gts)
}

pub fn same_predictions(a: &[Prediction], b: &[Prediction], tol: f64) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.segment == y.segment && x.label == y.label && (x.score - y.score).abs() <= tol
        })
}
