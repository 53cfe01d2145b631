//! Trainable components: frame encoder, snippet averaging, anchor head, clip
//! classifier, losses and checkpoints. Gradients are computed by hand-written
//! backward passes and checked against central finite differences in tests.

pub mod anchors;
pub mod checkpoint;
pub mod decode;
pub mod encoder;
pub mod head;
pub mod loss;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use anchors::AnchorTable;
use encoder::Encoder;
use head::TalHead;
use loss::{AnchorTarget, LossBreakdown, LossConfig};

/// Named access to parameter tensors, in a fixed order.
pub trait Parameterized {
    fn named_params(&self) -> Vec<(String, &[f64])>;
    fn named_params_mut(&mut self) -> Vec<(String, &mut [f64])>;

    fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.len()).sum()
    }

    fn checksum(&self) -> u64 {
        crate::util::checksum(self.named_params().into_iter().map(|(_, p)| p))
    }

    fn flat(&self) -> Vec<f64> {
        self.named_params().into_iter().flat_map(|(_, p)| p.to_vec()).collect()
    }

    fn all_finite(&self) -> bool {
        self.named_params().iter().all(|(_, p)| p.iter().all(|v| v.is_finite()))
    }

    fn scale(&mut self, factor: f64) {
        for (_, p) in self.named_params_mut() {
            for v in p {
                *v *= factor;
            }
        }
    }
}

/// Snippet feature sequence `X` of one video, `C × L`, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SnippetFeatures {
    pub c: usize,
    pub l: usize,
    pub data: Vec<f64>,
}

impl SnippetFeatures {
    pub fn zeros(c: usize, l: usize) -> Self {
        Self {
            c,
            l,
            data: vec![0.0; c * l],
        }
    }

    pub fn at(&self, c: usize, l: usize) -> f64 {
        self.data[c * self.l + l]
    }
}

/// Mean over the frame axis of `(L, F, C)` frame features.
pub fn snippet_average(frame_feats: &[f64], l: usize, frames: usize, c: usize) -> Result<SnippetFeatures> {
    if frame_feats.len() != l * frames * c || frames == 0 {
        return Err(Error::Shape(format!(
            "expected {l} x {frames} x {c} frame features, got {}",
            frame_feats.len()
        )));
    }
    let mut x = SnippetFeatures::zeros(c, l);
    for s in 0..l {
        for f in 0..frames {
            let row = &frame_feats[(s * frames + f) * c..(s * frames + f + 1) * c];
            for (ci, v) in row.iter().enumerate() {
                x.data[ci * l + s] += v;
            }
        }
    }
    let inv = 1.0 / frames as f64;
    for v in &mut x.data {
        *v *= inv;
    }
    Ok(x)
}

/// Gradient of [`snippet_average`] for one snippet: `frames × C`.
fn snippet_average_backward(dx: &SnippetFeatures, s: usize, frames: usize) -> Vec<f64> {
    let inv = 1.0 / frames as f64;
    let mut out = Vec::with_capacity(frames * dx.c);
    for _ in 0..frames {
        for c in 0..dx.c {
            out.push(dx.at(c, s) * inv);
        }
    }
    out
}

/// Encodes all snippets of one video (`L × F × H × W × 3`) into `X`.
pub fn encode_video(encoder: &Encoder, snippets: &[f32], l: usize, frames: usize, h: usize, w: usize) -> Result<SnippetFeatures> {
    let snip = frames * h * w * 3;
    if snippets.len() != l * snip {
        return Err(Error::Shape(format!(
            "expected {l} snippets of {snip} values, got {}",
            snippets.len()
        )));
    }
    let c = encoder.feature_dim();
    let mut feats = Vec::with_capacity(l * frames * c);
    for s in 0..l {
        let (f, _) = encoder.forward_snippet(&snippets[s * snip..(s + 1) * snip], frames, h, w);
        feats.extend(f);
    }
    snippet_average(&feats, l, frames, c)
}

/// Loss of one video through encoder and head, accumulating `scale`-weighted
/// gradients. Passing `None` for `encoder_grads` treats the encoder as frozen.
#[allow(clippy::too_many_arguments)]
pub fn video_loss_and_grads(
    encoder: &Encoder,
    head: &TalHead,
    snippets: &[f32],
    dims: (usize, usize, usize, usize),
    anchors: &AnchorTable,
    targets: &[AnchorTarget],
    loss_cfg: &LossConfig,
    scale: f64,
    encoder_grads: Option<&mut Encoder>,
    head_grads: &mut TalHead,
) -> Result<LossBreakdown> {
    let (l, frames, h, w) = dims;
    let snip = frames * h * w * 3;
    if snippets.len() != l * snip {
        return Err(Error::Shape(format!(
            "expected {l} snippets of {snip} values, got {}",
            snippets.len()
        )));
    }
    let c = encoder.feature_dim();
    let mut feats = Vec::with_capacity(l * frames * c);
    let mut caches = Vec::with_capacity(l);
    for s in 0..l {
        let (f, cache) = encoder.forward_snippet(&snippets[s * snip..(s + 1) * snip], frames, h, w);
        feats.extend(f);
        if encoder_grads.is_some() {
            caches.push(cache);
        }
    }
    let x = snippet_average(&feats, l, frames, c)?;
    let (out, head_cache) = head.forward(&x, anchors)?;
    let (breakdown, mut d_out) = loss::tal_loss_with_grad(&out, targets, loss_cfg)?;
    for v in d_out.logits.iter_mut().chain(d_out.offsets.iter_mut()) {
        *v *= scale;
    }
    let dx = head.backward(&x, anchors, &head_cache, &d_out, head_grads);
    if let Some(eg) = encoder_grads {
        for (s, cache) in caches.iter().enumerate() {
            let d_feats = snippet_average_backward(&dx, s, frames);
            encoder.backward_snippet(cache, &d_feats, eg);
        }
    }
    Ok(breakdown)
}

/// Linear classifier over globally pooled clip features.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub feature_dim: usize,
    pub num_classes: usize,
    /// `(K, C)`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ClassifierHead {
    pub fn zeros(feature_dim: usize, num_classes: usize) -> Self {
        Self {
            feature_dim,
            num_classes,
            weight: vec![0.0; feature_dim * num_classes],
            bias: vec![0.0; num_classes],
        }
    }

    pub fn init(feature_dim: usize, num_classes: usize, rng: &mut impl Rng) -> Self {
        let mut head = Self::zeros(feature_dim, num_classes);
        let n = Normal::new(0.0, (1.0 / feature_dim as f64).sqrt()).expect("positive std");
        for w in &mut head.weight {
            *w = n.sample(rng);
        }
        head
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.feature_dim, self.num_classes)
    }

    pub fn forward(&self, pooled: &[f64]) -> Vec<f64> {
        (0..self.num_classes)
            .map(|k| {
                self.bias[k]
                    + self.weight[k * self.feature_dim..(k + 1) * self.feature_dim]
                        .iter()
                        .zip(pooled)
                        .map(|(w, x)| w * x)
                        .sum::<f64>()
            })
            .collect()
    }
}

impl Parameterized for ClassifierHead {
    fn named_params(&self) -> Vec<(String, &[f64])> {
        vec![
            ("classifier.weight".into(), self.weight.as_slice()),
            ("classifier.bias".into(), self.bias.as_slice()),
        ]
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut [f64])> {
        vec![
            ("classifier.weight".into(), self.weight.as_mut_slice()),
            ("classifier.bias".into(), self.bias.as_mut_slice()),
        ]
    }
}

/// Classifier logits for a clip given as `n` snippets of `frames × h × w × 3`.
pub fn classify_clip(encoder: &Encoder, classifier: &ClassifierHead, snippets: &[f32], n: usize, frames: usize, h: usize, w: usize) -> Vec<f64> {
    let x = encode_video(encoder, snippets, n, frames, h, w).expect("clip snippets sized by caller");
    classifier.forward(&pool_all(&x))
}

/// Global average over the snippet axis.
fn pool_all(x: &SnippetFeatures) -> Vec<f64> {
    (0..x.c)
        .map(|c| x.data[c * x.l..(c + 1) * x.l].iter().sum::<f64>() / x.l as f64)
        .collect()
}

/// Cross-entropy of one clip, accumulating `scale`-weighted gradients.
#[allow(clippy::too_many_arguments)]
pub fn clip_loss_and_grads(
    encoder: &Encoder,
    classifier: &ClassifierHead,
    snippets: &[f32],
    dims: (usize, usize, usize, usize),
    label: usize,
    scale: f64,
    encoder_grads: &mut Encoder,
    classifier_grads: &mut ClassifierHead,
) -> Result<(f64, bool)> {
    let (n, frames, h, w) = dims;
    let snip = frames * h * w * 3;
    let c = encoder.feature_dim();
    let mut feats = Vec::with_capacity(n * frames * c);
    let mut caches = Vec::with_capacity(n);
    for s in 0..n {
        let (f, cache) = encoder.forward_snippet(&snippets[s * snip..(s + 1) * snip], frames, h, w);
        feats.extend(f);
        caches.push(cache);
    }
    let x = snippet_average(&feats, n, frames, c)?;
    let pooled = pool_all(&x);
    let logits = classifier.forward(&pooled);
    let mut d_logits = vec![0.0; logits.len()];
    let loss = loss::classification_loss(&logits, label, Some(&mut d_logits))?;
    let predicted = (0..logits.len())
        .max_by(|&a, &b| logits[a].total_cmp(&logits[b]).then(b.cmp(&a)))
        .unwrap_or(0);
    let mut d_pooled = vec![0.0; c];
    for (k, &g) in d_logits.iter().enumerate() {
        let g = g * scale;
        classifier_grads.bias[k] += g;
        for ci in 0..c {
            classifier_grads.weight[k * c + ci] += g * pooled[ci];
            d_pooled[ci] += g * classifier.weight[k * c + ci];
        }
    }
    // pooling over snippets then frames is a plain mean over all frames
    let inv = 1.0 / (n * frames) as f64;
    let d_feats: Vec<f64> = (0..frames).flat_map(|_| d_pooled.iter().map(move |g| g * inv)).collect();
    for cache in &caches {
        encoder.backward_snippet(cache, &d_feats, encoder_grads);
    }
    Ok((loss, predicted == label))
}
