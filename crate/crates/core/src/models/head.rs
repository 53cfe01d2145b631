//! Anchor scoring head.
//!
//! Each anchor is described by three mean-pooled windows of the snippet
//! features (inside the anchor, a left and a right context) and scored by a
//! two-layer perceptron shared across anchors. The output per anchor is
//! `K + 1` class logits (index 0 is background) and two boundary offsets in
//! snippet units.
//!
//! Pooling and the first linear layer commute, so the first layer is applied
//! once per snippet and pooled with prefix sums. That keeps the cost per
//! anchor at `O(hidden · (K + 3))`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::anchors::AnchorTable;
use super::{Parameterized, SnippetFeatures};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadSpec {
    pub hidden: usize,
}

impl Default for HeadSpec {
    fn default() -> Self {
        Self { hidden: 32 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TalHead {
    pub feature_dim: usize,
    pub hidden: usize,
    pub num_classes: usize,
    /// `(hidden, 3 · C)`: inside, left, right blocks.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `(K + 3, hidden)`: `K + 1` logits then start/end offsets.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// Per-anchor outputs, one row per anchor in [`AnchorTable`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    pub l: usize,
    pub num_classes: usize,
    /// `(anchors, K + 1)`
    pub logits: Vec<f64>,
    /// `(anchors, 2)`
    pub offsets: Vec<f64>,
}

impl HeadOutput {
    pub fn num_anchors(&self) -> usize {
        self.offsets.len() / 2
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            l: self.l,
            num_classes: self.num_classes,
            logits: vec![0.0; self.logits.len()],
            offsets: vec![0.0; self.offsets.len()],
        }
    }

    pub fn logits_of(&self, anchor: usize) -> &[f64] {
        let k = self.num_classes + 1;
        &self.logits[anchor * k..(anchor + 1) * k]
    }
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    hidden_act: Vec<f64>,
}

impl TalHead {
    pub fn zeros(feature_dim: usize, spec: &HeadSpec, num_classes: usize) -> Result<Self> {
        if feature_dim == 0 || spec.hidden == 0 || num_classes == 0 {
            return Err(Error::InvalidArgument(
                "head dimensions must be positive".into(),
            ));
        }
        let out = num_classes + 3;
        Ok(Self {
            feature_dim,
            hidden: spec.hidden,
            num_classes,
            w1: vec![0.0; spec.hidden * 3 * feature_dim],
            b1: vec![0.0; spec.hidden],
            w2: vec![0.0; out * spec.hidden],
            b2: vec![0.0; out],
        })
    }

    pub fn init(feature_dim: usize, spec: &HeadSpec, num_classes: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut head = Self::zeros(feature_dim, spec, num_classes)?;
        let n1 = Normal::new(0.0, (2.0 / (3 * feature_dim) as f64).sqrt()).expect("positive std");
        for w in &mut head.w1 {
            *w = n1.sample(rng);
        }
        let n2 = Normal::new(0.0, (1.0 / spec.hidden as f64).sqrt()).expect("positive std");
        for w in &mut head.w2 {
            *w = n2.sample(rng);
        }
        Ok(head)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w1: vec![0.0; self.w1.len()],
            b1: vec![0.0; self.b1.len()],
            w2: vec![0.0; self.w2.len()],
            b2: vec![0.0; self.b2.len()],
            ..self.clone()
        }
    }

    fn out_dim(&self) -> usize {
        self.num_classes + 3
    }

    /// Per-snippet first-layer projections for the three pooling blocks,
    /// as prefix sums of shape `(L + 1, hidden)`.
    fn projected_prefix(&self, x: &SnippetFeatures) -> [Vec<f64>; 3] {
        let (c, l, hd) = (self.feature_dim, x.l, self.hidden);
        std::array::from_fn(|block| {
            let mut prefix = vec![0f64; (l + 1) * hd];
            for j in 0..l {
                let (done, rest) = prefix.split_at_mut((j + 1) * hd);
                let prev = &done[j * hd..];
                let row = &mut rest[..hd];
                for h in 0..hd {
                    let wrow = &self.w1[h * 3 * c + block * c..h * 3 * c + (block + 1) * c];
                    let mut acc = 0.0;
                    for (ci, w) in wrow.iter().enumerate() {
                        acc += w * x.data[ci * l + j];
                    }
                    row[h] = prev[h] + acc;
                }
            }
            prefix
        })
    }

    pub fn forward(&self, x: &SnippetFeatures, anchors: &AnchorTable) -> Result<(HeadOutput, HeadCache)> {
        if x.c != self.feature_dim {
            return Err(Error::Shape(format!(
                "head expects {} feature channels, got {}",
                self.feature_dim, x.c
            )));
        }
        if x.l != anchors.l {
            return Err(Error::Shape(format!(
                "features have L = {} but the anchor table was built for L = {}",
                x.l, anchors.l
            )));
        }
        let hd = self.hidden;
        let od = self.out_dim();
        let k1 = self.num_classes + 1;
        let prefix = self.projected_prefix(x);
        let n = anchors.len();
        let mut hidden_act = vec![0f64; n * hd];
        let mut logits = vec![0f64; n * k1];
        let mut offsets = vec![0f64; n * 2];
        let mut out = vec![0f64; od];
        for (a, ranges) in anchors.ranges.iter().enumerate() {
            let hrow = &mut hidden_act[a * hd..(a + 1) * hd];
            hrow.copy_from_slice(&self.b1);
            for (block, &(lo, hi)) in ranges.iter().enumerate() {
                let inv = 1.0 / (hi - lo + 1) as f64;
                let p = &prefix[block];
                for h in 0..hd {
                    hrow[h] += (p[(hi + 1) * hd + h] - p[lo * hd + h]) * inv;
                }
            }
            for v in hrow.iter_mut() {
                *v = v.max(0.0);
            }
            for (o, slot) in out.iter_mut().enumerate() {
                let wrow = &self.w2[o * hd..(o + 1) * hd];
                *slot = self.b2[o] + wrow.iter().zip(hrow.iter()).map(|(w, h)| w * h).sum::<f64>();
            }
            logits[a * k1..(a + 1) * k1].copy_from_slice(&out[..k1]);
            offsets[a * 2..a * 2 + 2].copy_from_slice(&out[k1..]);
        }
        Ok((
            HeadOutput {
                l: x.l,
                num_classes: self.num_classes,
                logits,
                offsets,
            },
            HeadCache { hidden_act },
        ))
    }

    /// Accumulates parameter gradients into `grads` and returns `dL/dX`.
    pub fn backward(
        &self,
        x: &SnippetFeatures,
        anchors: &AnchorTable,
        cache: &HeadCache,
        d_out: &HeadOutput,
        grads: &mut TalHead,
    ) -> SnippetFeatures {
        let (c, l, hd) = (self.feature_dim, x.l, self.hidden);
        let od = self.out_dim();
        let k1 = self.num_classes + 1;
        // difference arrays for the three pooled blocks, (L + 1, hidden)
        let mut diff = [vec![0f64; (l + 1) * hd], vec![0f64; (l + 1) * hd], vec![0f64; (l + 1) * hd]];
        let mut d_row = vec![0f64; od];
        let mut d_hidden = vec![0f64; hd];
        for (a, ranges) in anchors.ranges.iter().enumerate() {
            d_row[..k1].copy_from_slice(&d_out.logits[a * k1..(a + 1) * k1]);
            d_row[k1..].copy_from_slice(&d_out.offsets[a * 2..a * 2 + 2]);
            if d_row.iter().all(|&v| v == 0.0) {
                continue;
            }
            let hrow = &cache.hidden_act[a * hd..(a + 1) * hd];
            d_hidden.fill(0.0);
            for (o, &g) in d_row.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                grads.b2[o] += g;
                let gw = &mut grads.w2[o * hd..(o + 1) * hd];
                let wrow = &self.w2[o * hd..(o + 1) * hd];
                for h in 0..hd {
                    gw[h] += g * hrow[h];
                    d_hidden[h] += g * wrow[h];
                }
            }
            for h in 0..hd {
                if hrow[h] <= 0.0 {
                    d_hidden[h] = 0.0;
                }
                grads.b1[h] += d_hidden[h];
            }
            for (block, &(lo, hi)) in ranges.iter().enumerate() {
                let inv = 1.0 / (hi - lo + 1) as f64;
                let dd = &mut diff[block];
                for h in 0..hd {
                    let g = d_hidden[h] * inv;
                    dd[lo * hd + h] += g;
                    dd[(hi + 1) * hd + h] -= g;
                }
            }
        }
        let mut dx = SnippetFeatures::zeros(c, l);
        let mut d_proj = vec![0f64; hd];
        for (block, dd) in diff.iter().enumerate() {
            d_proj.fill(0.0);
            for j in 0..l {
                for h in 0..hd {
                    d_proj[h] += dd[j * hd + h];
                }
                for h in 0..hd {
                    let g = d_proj[h];
                    if g == 0.0 {
                        continue;
                    }
                    let base = h * 3 * c + block * c;
                    for ci in 0..c {
                        grads.w1[base + ci] += g * x.data[ci * l + j];
                        dx.data[ci * l + j] += g * self.w1[base + ci];
                    }
                }
            }
        }
        dx
    }
}

impl Parameterized for TalHead {
    fn named_params(&self) -> Vec<(String, &[f64])> {
        vec![
            ("head.fc1.weight".into(), self.w1.as_slice()),
            ("head.fc1.bias".into(), self.b1.as_slice()),
            ("head.fc2.weight".into(), self.w2.as_slice()),
            ("head.fc2.bias".into(), self.b2.as_slice()),
        ]
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut [f64])> {
        vec![
            ("head.fc1.weight".into(), self.w1.as_mut_slice()),
            ("head.fc1.bias".into(), self.b1.as_mut_slice()),
            ("head.fc2.weight".into(), self.w2.as_mut_slice()),
            ("head.fc2.bias".into(), self.b2.as_mut_slice()),
        ]
    }
}
