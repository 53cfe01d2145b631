//! Frame encoder: strided 3×3 convolutions with ReLU, a TSM-style temporal
//! channel shift in front of the second layer, and global average pooling to
//! one `C`-dimensional vector per frame.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Parameterized;
use crate::error::{Error, Result};
use crate::snippets::SnippetBatch;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSpec {
    /// Output channels of each layer; the last entry is the feature dimension.
    pub widths: Vec<usize>,
    pub temporal_shift: bool,
    /// Fraction of channels shifted in each temporal direction.
    pub shift_fraction: f64,
    /// Pixels enter the network as `(p - input_mean) * input_scale`.
    pub input_mean: f64,
    pub input_scale: f64,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            widths: vec![8, 8, 16],
            temporal_shift: true,
            shift_fraction: 0.25,
            input_mean: 0.25,
            input_scale: 5.0,
        }
    }
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::InvalidArgument(
                "encoder needs at least one layer with positive width".into(),
            ));
        }
        if !(self.input_mean.is_finite() && self.input_scale.is_finite() && self.input_scale > 0.0) {
            return Err(Error::InvalidArgument(
                "input_mean must be finite and input_scale positive".into(),
            ));
        }
        if !(0.0..=0.5).contains(&self.shift_fraction) {
            return Err(Error::InvalidArgument(
                "shift_fraction must lie in [0, 0.5]".into(),
            ));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    /// Layer whose input is temporally shifted.
    pub fn shift_layer(&self) -> usize {
        if self.widths.len() >= 2 {
            1
        } else {
            0
        }
    }

    fn shifted_channels(&self, channels: usize) -> usize {
        if !self.temporal_shift || self.shift_fraction == 0.0 {
            return 0;
        }
        ((channels as f64 * self.shift_fraction).round() as usize).clamp(1, channels / 2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    /// `(out, in, 3, 3)`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Output size of a 3×3, stride-2, pad-1 convolution.
fn out_size(n: usize) -> usize {
    n.div_ceil(2)
}

/// Output columns `ox` whose tap `k` reads an in-bounds input column.
fn valid_range(k: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    let lo = usize::from(k == 0);
    let hi = if n_in + 1 < k {
        0
    } else {
        ((n_in + 1 - k).div_ceil(2)).min(n_out)
    };
    (lo, hi.max(lo))
}

impl Conv2d {
    fn zeros(in_ch: usize, out_ch: usize) -> Self {
        Self {
            in_ch,
            out_ch,
            weight: vec![0.0; out_ch * in_ch * 9],
            bias: vec![0.0; out_ch],
        }
    }

    /// `input` is `(in_ch, h, w)`; returns `(out_ch, ho, wo)` pre-activation.
    fn forward(&self, input: &[f64], h: usize, w: usize, out: &mut [f64]) {
        let (ho, wo) = (out_size(h), out_size(w));
        for o in 0..self.out_ch {
            let plane = &mut out[o * ho * wo..(o + 1) * ho * wo];
            plane.fill(self.bias[o]);
            for i in 0..self.in_ch {
                let src = &input[i * h * w..(i + 1) * h * w];
                for ky in 0..3 {
                    let (oy0, oy1) = valid_range(ky, h, ho);
                    for kx in 0..3 {
                        let wt = self.weight[((o * self.in_ch + i) * 3 + ky) * 3 + kx];
                        let (ox0, ox1) = valid_range(kx, w, wo);
                        for oy in oy0..oy1 {
                            let iy = 2 * oy + ky - 1;
                            let row = &src[iy * w..(iy + 1) * w];
                            let dst = &mut plane[oy * wo..(oy + 1) * wo];
                            for ox in ox0..ox1 {
                                dst[ox] += wt * row[2 * ox + kx - 1];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Accumulates parameter gradients into `grad`; writes the input gradient
    /// into `d_input` when given.
    fn backward(
        &self,
        input: &[f64],
        h: usize,
        w: usize,
        d_out: &[f64],
        grad: &mut Conv2d,
        mut d_input: Option<&mut [f64]>,
    ) {
        let (ho, wo) = (out_size(h), out_size(w));
        if let Some(d) = d_input.as_deref_mut() {
            d.fill(0.0);
        }
        for o in 0..self.out_ch {
            let dplane = &d_out[o * ho * wo..(o + 1) * ho * wo];
            grad.bias[o] += dplane.iter().sum::<f64>();
            for i in 0..self.in_ch {
                let src = &input[i * h * w..(i + 1) * h * w];
                for ky in 0..3 {
                    let (oy0, oy1) = valid_range(ky, h, ho);
                    for kx in 0..3 {
                        let widx = ((o * self.in_ch + i) * 3 + ky) * 3 + kx;
                        let wt = self.weight[widx];
                        let (ox0, ox1) = valid_range(kx, w, wo);
                        let mut acc = 0.0;
                        for oy in oy0..oy1 {
                            let iy = 2 * oy + ky - 1;
                            let row = &src[iy * w..(iy + 1) * w];
                            let drow = &dplane[oy * wo..(oy + 1) * wo];
                            for ox in ox0..ox1 {
                                acc += drow[ox] * row[2 * ox + kx - 1];
                            }
                            if let Some(d) = d_input.as_deref_mut() {
                                let dst = &mut d[i * h * w + iy * w..i * h * w + (iy + 1) * w];
                                for ox in ox0..ox1 {
                                    dst[2 * ox + kx - 1] += wt * drow[ox];
                                }
                            }
                        }
                        grad.weight[widx] += acc;
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub spec: EncoderSpec,
    pub layers: Vec<Conv2d>,
}

/// Activations of one snippet kept for the backward pass.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    frames: usize,
    /// Input spatial size of each layer, plus the final output size.
    sizes: Vec<(usize, usize)>,
    /// Per layer: the (shifted) input of all frames, `frames × in_ch × h × w`.
    inputs: Vec<Vec<f64>>,
    /// Per layer: the post-ReLU output before any shift.
    outputs: Vec<Vec<f64>>,
}

/// Shifts the first `n` channels one frame forward in time and the next `n`
/// one frame backward, zero-filling at the ends.
fn temporal_shift(x: &mut [f64], frames: usize, channels: usize, plane: usize, n: usize, reverse: bool) {
    if n == 0 || frames < 2 {
        if n > 0 {
            let fl = channels * plane;
            for f in 0..frames {
                x[f * fl..f * fl + 2 * n * plane].fill(0.0);
            }
        }
        return;
    }
    let fl = channels * plane;
    // "from past": out[t][c] = in[t-1][c] for c < n
    // "from future": out[t][c] = in[t+1][c] for n <= c < 2n
    // The adjoint swaps the two directions.
    let (past, future) = if reverse { (n..2 * n, 0..n) } else { (0..n, n..2 * n) };
    let past = past.start * plane..past.end * plane;
    let future = future.start * plane..future.end * plane;
    for t in (1..frames).rev() {
        let (a, b) = x.split_at_mut(t * fl);
        b[past.clone()].copy_from_slice(&a[(t - 1) * fl..][past.clone()]);
    }
    x[past.clone()].fill(0.0);
    for t in 0..frames - 1 {
        let (a, b) = x.split_at_mut((t + 1) * fl);
        a[t * fl..][future.clone()].copy_from_slice(&b[future.clone()]);
    }
    x[(frames - 1) * fl..][future].fill(0.0);
}

impl Encoder {
    pub fn zeros(spec: &EncoderSpec) -> Result<Self> {
        spec.validate()?;
        let mut in_ch = 3;
        let layers = spec
            .widths
            .iter()
            .map(|&out| {
                let l = Conv2d::zeros(in_ch, out);
                in_ch = out;
                l
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            layers,
        })
    }

    /// He-normal weights, zero biases.
    pub fn init(spec: &EncoderSpec, rng: &mut impl Rng) -> Result<Self> {
        let mut enc = Self::zeros(spec)?;
        for layer in &mut enc.layers {
            let std = (2.0 / (layer.in_ch * 9) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            for w in &mut layer.weight {
                *w = normal.sample(rng);
            }
        }
        Ok(enc)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.spec).expect("spec already validated")
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim()
    }

    /// Encodes one snippet of `frames × h × w × 3` channel-last pixels into
    /// `frames × C` features.
    pub fn forward_snippet(&self, pixels: &[f32], frames: usize, h: usize, w: usize) -> (Vec<f64>, EncoderCache) {
        debug_assert_eq!(pixels.len(), frames * h * w * 3);
        let shift_at = self.spec.shift_layer();
        let mut sizes = vec![(h, w)];
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut outputs = Vec::with_capacity(self.layers.len());

        let mut x = vec![0f64; frames * 3 * h * w];
        for f in 0..frames {
            let src = &pixels[f * h * w * 3..(f + 1) * h * w * 3];
            let dst = &mut x[f * 3 * h * w..(f + 1) * 3 * h * w];
            for p in 0..h * w {
                for c in 0..3 {
                    dst[c * h * w + p] = (f64::from(src[p * 3 + c]) - self.spec.input_mean) * self.spec.input_scale;
                }
            }
        }

        let (mut ch, mut hh, mut ww) = (3, h, w);
        for (li, layer) in self.layers.iter().enumerate() {
            if li == shift_at {
                let n = self.spec.shifted_channels(ch);
                temporal_shift(&mut x, frames, ch, hh * ww, n, false);
            }
            let (ho, wo) = (out_size(hh), out_size(ww));
            let mut y = vec![0f64; frames * layer.out_ch * ho * wo];
            for f in 0..frames {
                layer.forward(
                    &x[f * ch * hh * ww..(f + 1) * ch * hh * ww],
                    hh,
                    ww,
                    &mut y[f * layer.out_ch * ho * wo..(f + 1) * layer.out_ch * ho * wo],
                );
            }
            for v in &mut y {
                *v = v.max(0.0);
            }
            outputs.push(y.clone());
            inputs.push(std::mem::replace(&mut x, y));
            ch = layer.out_ch;
            hh = ho;
            ww = wo;
            sizes.push((hh, ww));
        }

        let plane = hh * ww;
        let mut feats = vec![0f64; frames * ch];
        for f in 0..frames {
            for c in 0..ch {
                let s: f64 = x[(f * ch + c) * plane..(f * ch + c + 1) * plane].iter().sum();
                feats[f * ch + c] = s / plane as f64;
            }
        }
        (
            feats,
            EncoderCache {
                frames,
                sizes,
                inputs,
                outputs,
            },
        )
    }

    /// Backpropagates `d_feats` (`frames × C`) and accumulates into `grads`.
    pub fn backward_snippet(&self, cache: &EncoderCache, d_feats: &[f64], grads: &mut Encoder) {
        let frames = cache.frames;
        let n_layers = self.layers.len();
        let shift_at = self.spec.shift_layer();
        let (hl, wl) = cache.sizes[n_layers];
        let c_last = self.feature_dim();
        let plane = hl * wl;

        // gradient with respect to the post-ReLU output of the current layer
        let mut d = vec![0f64; frames * c_last * plane];
        for f in 0..frames {
            for c in 0..c_last {
                let g = d_feats[f * c_last + c] / plane as f64;
                d[(f * c_last + c) * plane..(f * c_last + c + 1) * plane].fill(g);
            }
        }
        for li in (0..n_layers).rev() {
            let layer = &self.layers[li];
            let (h, w) = cache.sizes[li];
            let (ho, wo) = cache.sizes[li + 1];
            for (dv, &y) in d.iter_mut().zip(&cache.outputs[li]) {
                if y <= 0.0 {
                    *dv = 0.0;
                }
            }
            let input = &cache.inputs[li];
            let in_len = layer.in_ch * h * w;
            let out_len = layer.out_ch * ho * wo;
            let need_input_grad = li > 0;
            let mut d_in = if need_input_grad {
                vec![0f64; frames * in_len]
            } else {
                Vec::new()
            };
            for f in 0..frames {
                let di = need_input_grad.then(|| &mut d_in[f * in_len..(f + 1) * in_len]);
                layer.backward(
                    &input[f * in_len..(f + 1) * in_len],
                    h,
                    w,
                    &d[f * out_len..(f + 1) * out_len],
                    &mut grads.layers[li],
                    di,
                );
            }
            if !need_input_grad {
                break;
            }
            if li == shift_at {
                let n = self.spec.shifted_channels(layer.in_ch);
                temporal_shift(&mut d_in, frames, layer.in_ch, h * w, n, true);
            }
            d = d_in;
        }
    }

    /// Frame features for every snippet of a batch: `(B, L, F, C)`, row-major.
    pub fn forward_batch(&self, batch: &SnippetBatch) -> Result<Vec<f64>> {
        let c = self.feature_dim();
        let (l, f) = (batch.config.l, batch.frames_per_snippet);
        let mut out = Vec::with_capacity(batch.batch * l * f * c);
        let snip = batch.snippet_len();
        for b in 0..batch.batch {
            let item = batch.item(b);
            for s in 0..l {
                let (feats, _) =
                    self.forward_snippet(&item[s * snip..(s + 1) * snip], f, batch.config.h, batch.config.w);
                if feats.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Diverged {
                        stage: "encoder",
                        step: 0,
                        batch: b,
                        last_good_epoch: None,
                    });
                }
                out.extend(feats);
            }
        }
        Ok(out)
    }
}

impl Parameterized for Encoder {
    fn named_params(&self) -> Vec<(String, &[f64])> {
        let mut v = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            v.push((format!("encoder.conv{i}.weight"), l.weight.as_slice()));
            v.push((format!("encoder.conv{i}.bias"), l.bias.as_slice()));
        }
        v
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut v = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            v.push((format!("encoder.conv{i}.weight"), l.weight.as_mut_slice()));
            v.push((format!("encoder.conv{i}.bias"), l.bias.as_mut_slice()));
        }
        v
    }
}
