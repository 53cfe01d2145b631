//! Target assignment and the localization / classification losses.

use serde::{Deserialize, Serialize};

use super::anchors::Anchor;
use super::head::HeadOutput;
use crate::domain::iou_raw;
use crate::error::{Error, Result};

/// Ground-truth instance in snippet coordinates of the current `L`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnippetInstance {
    pub start: f64,
    pub end: f64,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorTarget {
    /// 0 is background, `label + 1` otherwise.
    pub class: usize,
    pub offsets: [f64; 2],
    pub weight: f64,
}

impl AnchorTarget {
    pub fn is_positive(&self) -> bool {
        self.weight > 0.0 && self.class > 0
    }

    pub fn is_negative(&self) -> bool {
        self.weight > 0.0 && self.class == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the regression term.
    pub lambda: f64,
    pub iou_pos: f64,
    pub iou_neg: f64,
    /// Give positives and negatives equal total weight in the class term.
    pub balance: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            iou_pos: 0.7,
            iou_neg: 0.3,
            balance: true,
        }
    }
}

/// Labels each anchor by its best-overlapping instance: positive at
/// `iou >= iou_pos`, background at `iou <= iou_neg`, ignored in between.
pub fn assign_targets(anchors: &[Anchor], gts: &[SnippetInstance], iou_pos: f64, iou_neg: f64) -> Vec<AnchorTarget> {
    anchors
        .iter()
        .map(|a| {
            let (s, e) = (a.start as f64, a.end as f64);
            let mut best: Option<(f64, &SnippetInstance)> = None;
            for g in gts {
                let iou = iou_raw(s, e, g.start, g.end);
                if best.map_or(true, |(b, _)| iou > b) {
                    best = Some((iou, g));
                }
            }
            match best {
                Some((iou, g)) if iou >= iou_pos => AnchorTarget {
                    class: g.label + 1,
                    offsets: [g.start - s, g.end - e],
                    weight: 1.0,
                },
                Some((iou, _)) if iou > iou_neg => AnchorTarget {
                    class: 0,
                    offsets: [0.0; 2],
                    weight: 0.0,
                },
                _ => AnchorTarget {
                    class: 0,
                    offsets: [0.0; 2],
                    weight: 1.0,
                },
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub classification: f64,
    /// Already multiplied by `lambda`.
    pub regression: f64,
    pub positives: usize,
    pub negatives: usize,
}

/// Numerically stable `log Σ exp`.
fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Cross-entropy of `logits` against `target`, with `d loss / d logits` written to `grad`.
pub fn softmax_cross_entropy(logits: &[f64], target: usize, grad: Option<&mut [f64]>) -> f64 {
    let lse = log_sum_exp(logits);
    if let Some(g) = grad {
        for (gi, z) in g.iter_mut().zip(logits) {
            *gi = (z - lse).exp();
        }
        g[target] -= 1.0;
    }
    lse - logits[target]
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|z| (z - lse).exp()).collect()
}

fn smooth_l1(x: f64) -> (f64, f64) {
    if x.abs() < 1.0 {
        (0.5 * x * x, x)
    } else {
        (x.abs() - 0.5, x.signum())
    }
}

/// Class term plus `lambda` times smooth-L1 on the offsets of positive anchors.
pub fn tal_loss(out: &HeadOutput, targets: &[AnchorTarget], cfg: &LossConfig) -> Result<LossBreakdown> {
    tal_loss_inner(out, targets, cfg, None)
}

/// As [`tal_loss`], also returning the gradient with respect to the head output.
pub fn tal_loss_with_grad(out: &HeadOutput, targets: &[AnchorTarget], cfg: &LossConfig) -> Result<(LossBreakdown, HeadOutput)> {
    let mut grad = out.zeros_like();
    let b = tal_loss_inner(out, targets, cfg, Some(&mut grad))?;
    Ok((b, grad))
}

fn tal_loss_inner(
    out: &HeadOutput,
    targets: &[AnchorTarget],
    cfg: &LossConfig,
    mut grad: Option<&mut HeadOutput>,
) -> Result<LossBreakdown> {
    if targets.len() != out.num_anchors() {
        return Err(Error::Shape(format!(
            "{} targets for {} anchors",
            targets.len(),
            out.num_anchors()
        )));
    }
    let pos_w: f64 = targets.iter().filter(|t| t.is_positive()).map(|t| t.weight).sum();
    let neg_w: f64 = targets.iter().filter(|t| t.is_negative()).map(|t| t.weight).sum();
    let positives = targets.iter().filter(|t| t.is_positive()).count();
    let negatives = targets.iter().filter(|t| t.is_negative()).count();
    if pos_w + neg_w == 0.0 {
        return Err(Error::EmptyLoss);
    }
    let (pos_scale, neg_scale) = if cfg.balance && pos_w > 0.0 && neg_w > 0.0 {
        (0.5 / pos_w, 0.5 / neg_w)
    } else {
        let s = 1.0 / (pos_w + neg_w);
        (s, s)
    };
    let k1 = out.num_classes + 1;
    let mut cls = 0.0;
    let mut reg = 0.0;
    let mut g_row = vec![0f64; k1];
    for (a, t) in targets.iter().enumerate() {
        if t.weight <= 0.0 {
            continue;
        }
        let w = t.weight * if t.class > 0 { pos_scale } else { neg_scale };
        let logits = &out.logits[a * k1..(a + 1) * k1];
        let ce = softmax_cross_entropy(logits, t.class, grad.is_some().then_some(&mut g_row[..]));
        cls += w * ce;
        if let Some(g) = grad.as_deref_mut() {
            for (dst, v) in g.logits[a * k1..(a + 1) * k1].iter_mut().zip(&g_row) {
                *dst = w * v;
            }
        }
        if t.class > 0 {
            let scale = cfg.lambda / positives as f64;
            for d in 0..2 {
                let (l, dl) = smooth_l1(out.offsets[a * 2 + d] - t.offsets[d]);
                reg += scale * l;
                if let Some(g) = grad.as_deref_mut() {
                    g.offsets[a * 2 + d] = scale * dl;
                }
            }
        }
    }
    Ok(LossBreakdown {
        total: cls + reg,
        classification: cls,
        regression: reg,
        positives,
        negatives,
    })
}

/// Cross-entropy of a clip classifier; labels index `0..K` directly.
pub fn classification_loss(logits: &[f64], label: usize, grad: Option<&mut [f64]>) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::InvalidArgument(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    Ok(softmax_cross_entropy(logits, label, grad))
}
