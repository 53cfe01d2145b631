//! Snippet placement, frame windowing and spatial rescaling.
//!
//! A snippet is a window of consecutive frames, subsampled with a stride. A
//! video becomes `L` snippets whose centers are spread uniformly over the
//! range where a full window fits. Lower temporal fidelity recomputes the `L`
//! centers over the whole video instead of subsampling a finer grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fidelity::FidelityConfig;
use crate::synthgen::RawVideo;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SnippetPlan {
    pub window: usize,
    pub stride: usize,
}

impl Default for SnippetPlan {
    fn default() -> Self {
        Self { window: 64, stride: 8 }
    }
}

impl SnippetPlan {
    pub fn new(window: usize, stride: usize) -> Result<Self> {
        let plan = Self { window, stride };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.window == 0 || self.window % self.stride != 0 {
            return Err(Error::InvalidArgument(format!(
                "window {} must be a positive multiple of stride {}",
                self.window, self.stride
            )));
        }
        Ok(())
    }

    pub fn frames_per_snippet(&self) -> usize {
        self.window / self.stride
    }
}

/// Uniform snippet grid: center `i` sits at `first + i · spacing` frames.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnippetTimeline {
    pub first: f64,
    pub spacing: f64,
    pub count: usize,
}

impl SnippetTimeline {
    pub fn new(frames: usize, count: usize, window: usize) -> Result<Self> {
        if frames < window {
            return Err(Error::InvalidArgument(format!(
                "video of {frames} frames is shorter than the {window}-frame window"
            )));
        }
        if count == 0 {
            return Err(Error::InvalidArgument("snippet count must be at least 1".into()));
        }
        let lo = window as f64 / 2.0;
        let hi = frames as f64 - window as f64 / 2.0;
        Ok(if count == 1 {
            Self {
                first: (lo + hi) / 2.0,
                spacing: 0.0,
                count,
            }
        } else {
            Self {
                first: lo,
                spacing: (hi - lo) / (count - 1) as f64,
                count,
            }
        })
    }

    pub fn center(&self, i: usize) -> f64 {
        self.first + i as f64 * self.spacing
    }

    /// Frame position of a (fractional) snippet coordinate.
    pub fn frame_of(&self, u: f64) -> f64 {
        self.first + u * self.spacing
    }

    /// Snippet coordinate of a frame position; `None` for a degenerate grid.
    pub fn snippet_of(&self, frame: f64) -> Option<f64> {
        (self.spacing > 0.0).then(|| (frame - self.first) / self.spacing)
    }
}

/// `count` snippet centers (in frames) spread over `[window/2, frames − window/2]`.
pub fn snippet_centers(frames: usize, count: usize, window: usize) -> Result<Vec<f64>> {
    let tl = SnippetTimeline::new(frames, count, window)?;
    Ok((0..count).map(|i| tl.center(i)).collect())
}

/// Source frame indices for a snippet centered at `center`.
pub fn snippet_frame_indices(frames: usize, center: f64, plan: &SnippetPlan) -> Vec<usize> {
    let start = center.round() as i64 - (plan.window / 2) as i64;
    (0..plan.frames_per_snippet())
        .map(|j| (start + (j * plan.stride) as i64).clamp(0, frames as i64 - 1) as usize)
        .collect()
}

/// `frames_per_snippet × H × W × 3` values; out-of-range indices replicate the edge frame.
pub fn sample_snippet(video: &RawVideo, center: f64, plan: &SnippetPlan) -> Vec<f32> {
    let mut out = Vec::with_capacity(plan.frames_per_snippet() * video.frame_len());
    for t in snippet_frame_indices(video.frames, center, plan) {
        out.extend_from_slice(video.frame(t));
    }
    out
}

/// Area-averaging weights mapping `src` samples onto `dst` samples.
/// Row `i` holds `(first source index, weights)`; each row sums to 1.
fn area_weights(src: usize, dst: usize) -> Vec<(usize, Vec<f32>)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let lo = i as f64 * scale;
            let hi = (i + 1) as f64 * scale;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(src);
            let weights = (first..last)
                .map(|j| {
                    let overlap = (hi.min((j + 1) as f64) - lo.max(j as f64)).max(0.0);
                    (overlap / scale) as f32
                })
                .collect();
            (first, weights)
        })
        .collect()
}

/// Downscales `n` channel-last frames of `h × w × 3` to `th × tw × 3` by area averaging.
pub fn rescale_spatial(frames: &[f32], h: usize, w: usize, th: usize, tw: usize) -> Result<Vec<f32>> {
    if th > h || tw > w {
        return Err(Error::InvalidArgument(format!(
            "cannot upscale {h}x{w} to {th}x{tw}"
        )));
    }
    if th == 0 || tw == 0 {
        return Err(Error::InvalidArgument("target size must be positive".into()));
    }
    let frame_len = h * w * 3;
    if frames.len() % frame_len != 0 {
        return Err(Error::Shape(format!(
            "{} values is not a whole number of {h}x{w}x3 frames",
            frames.len()
        )));
    }
    if th == h && tw == w {
        return Ok(frames.to_vec());
    }
    let wy = area_weights(h, th);
    let wx = area_weights(w, tw);
    let n = frames.len() / frame_len;
    let mut out = Vec::with_capacity(n * th * tw * 3);
    let mut rows = vec![0f32; th * w * 3];
    for frame in frames.chunks_exact(frame_len) {
        rows.fill(0.0);
        for (oy, (y0, ws)) in wy.iter().enumerate() {
            let dst = &mut rows[oy * w * 3..(oy + 1) * w * 3];
            for (k, &wt) in ws.iter().enumerate() {
                let src = &frame[(y0 + k) * w * 3..(y0 + k + 1) * w * 3];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += wt * s;
                }
            }
        }
        for oy in 0..th {
            let row = &rows[oy * w * 3..(oy + 1) * w * 3];
            for (x0, ws) in &wx {
                let mut px = [0f32; 3];
                for (k, &wt) in ws.iter().enumerate() {
                    let at = (x0 + k) * 3;
                    for c in 0..3 {
                        px[c] += wt * row[at + c];
                    }
                }
                out.extend(px.iter().map(|v| v.clamp(0.0, 1.0)));
            }
        }
    }
    Ok(out)
}

/// Realized mini-batch: `(B, L, frames_per_snippet, H, W, 3)`.
#[derive(Debug, Clone)]
pub struct SnippetBatch {
    pub data: Vec<f32>,
    pub batch: usize,
    pub frames_per_snippet: usize,
    pub video_ids: Vec<String>,
    pub config: FidelityConfig,
}

impl SnippetBatch {
    pub fn shape(&self) -> [usize; 6] {
        [
            self.batch,
            self.config.l,
            self.frames_per_snippet,
            self.config.h,
            self.config.w,
            3,
        ]
    }

    pub fn item_len(&self) -> usize {
        self.config.l * self.snippet_len()
    }

    pub fn snippet_len(&self) -> usize {
        self.frames_per_snippet * self.config.h * self.config.w * 3
    }

    /// All snippets of batch item `b`.
    pub fn item(&self, b: usize) -> &[f32] {
        let n = self.item_len();
        &self.data[b * n..(b + 1) * n]
    }
}

/// Snippets of one video at `config`: `L × frames_per_snippet × H × W × 3`.
pub fn video_snippets(video: &RawVideo, config: &FidelityConfig, plan: &SnippetPlan) -> Result<Vec<f32>> {
    plan.validate()?;
    let centers = snippet_centers(video.frames, config.l, plan.window)?;
    let mut out = Vec::with_capacity(config.l * plan.frames_per_snippet() * config.h * config.w * 3);
    for c in centers {
        let raw = sample_snippet(video, c, plan);
        out.extend(rescale_spatial(&raw, video.height, video.width, config.h, config.w)?);
    }
    Ok(out)
}

pub fn batch_shape(batch: usize, config: &FidelityConfig, plan: &SnippetPlan) -> [usize; 6] {
    [batch, config.l, plan.frames_per_snippet(), config.h, config.w, 3]
}

pub fn build_batch(videos: &[&RawVideo], config: &FidelityConfig, plan: &SnippetPlan) -> Result<SnippetBatch> {
    let mut data = Vec::new();
    for v in videos {
        data.extend(video_snippets(v, config, plan)?);
    }
    Ok(SnippetBatch {
        data,
        batch: videos.len(),
        frames_per_snippet: plan.frames_per_snippet(),
        video_ids: videos.iter().map(|v| v.id.clone()).collect(),
        config: *config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fidelity::{derive_config, FidelityKind};
    use proptest::prelude::*;

    fn ramp_video(frames: usize, h: usize, w: usize) -> RawVideo {
        let n = h * w * 3;
        RawVideo {
            id: "ramp".into(),
            frames,
            height: h,
            width: w,
            data: (0..frames * n).map(|i| (i / n) as f32 / frames as f32).collect(),
        }
    }

    #[test]
    fn centers_for_default_grid() {
        let c = snippet_centers(800, 100, 64).unwrap();
        assert_eq!(c.len(), 100);
        assert_eq!(c[0], 32.0);
        assert_eq!(c[99], 768.0);
        for (i, v) in c.iter().enumerate() {
            let expected = 32.0 + i as f64 * (768.0 - 32.0) / 99.0;
            assert!((v - expected).abs() < 1e-9);
        }
        assert!(c.windows(2).all(|p| p[0] <= p[1]));
    }

    #[test]
    fn degenerate_centers() {
        assert_eq!(snippet_centers(800, 1, 64).unwrap(), vec![400.0]);
        assert_eq!(snippet_centers(64, 3, 64).unwrap(), vec![32.0; 3]);
        assert!(snippet_centers(63, 3, 64).is_err());
        assert!(snippet_centers(100, 0, 64).is_err());
    }

    #[test]
    fn snippet_frame_counts() {
        let v = ramp_video(100, 2, 2);
        assert_eq!(sample_snippet(&v, 50.0, &SnippetPlan::new(64, 8).unwrap()).len(), 8 * 12);
        assert_eq!(sample_snippet(&v, 50.0, &SnippetPlan::new(64, 64).unwrap()).len(), 12);
        assert!(SnippetPlan::new(64, 7).is_err());
    }

    #[test]
    fn early_center_replicates_first_frame() {
        let plan = SnippetPlan::default();
        let idx = snippet_frame_indices(800, 10.0, &plan);
        // reference: window starts at 10 - 32 = -22
        let expected: Vec<usize> = (0..8).map(|j| (-22 + 8 * j as i64).max(0) as usize).collect();
        assert_eq!(idx, expected);
        assert_eq!(&idx[..3], &[0, 0, 0]);
        let v = ramp_video(800, 1, 1);
        let s = sample_snippet(&v, 10.0, &plan);
        assert_eq!(&s[..3], v.frame(0));
        assert_eq!(&s[3..6], v.frame(0));
        assert_eq!(&s[9..12], v.frame(2));
    }

    #[test]
    fn late_center_replicates_last_frame() {
        let idx = snippet_frame_indices(100, 95.0, &SnippetPlan::default());
        assert_eq!(*idx.last().unwrap(), 99);
    }

    #[test]
    fn rescale_halves_and_preserves_constants() {
        let frames = vec![0.3f32; 2 * 224 * 224 * 3];
        let out = rescale_spatial(&frames, 224, 224, 112, 112).unwrap();
        assert_eq!(out.len(), 2 * 112 * 112 * 3);
        assert!(out.iter().all(|&v| (v - 0.3).abs() < 1e-6));
        let odd = rescale_spatial(&frames[..224 * 224 * 3], 224, 224, 158, 158).unwrap();
        assert!(odd.iter().all(|&v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn rescale_identity_is_bitwise() {
        let v = ramp_video(3, 5, 7);
        assert_eq!(rescale_spatial(&v.data, 5, 7, 5, 7).unwrap(), v.data);
    }

    #[test]
    fn rescale_rejects_upscaling() {
        assert!(rescale_spatial(&[0.0; 12], 2, 2, 3, 2).is_err());
    }

    #[test]
    fn rescale_box_average() {
        // 2x2 -> 1x1 is the mean of the four pixels, per channel
        let f = [0.0, 0.1, 0.2, 0.4, 0.5, 0.6, 0.2, 0.3, 0.4, 0.6, 0.7, 0.8];
        let out = rescale_spatial(&f, 2, 2, 1, 1).unwrap();
        for (c, v) in out.iter().enumerate() {
            let mean = (f[c] + f[3 + c] + f[6 + c] + f[9 + c]) / 4.0;
            assert!((v - mean).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn rescale_preserves_mean_and_range(h in 1usize..12, w in 1usize..12, th in 1usize..12, tw in 1usize..12, seed in any::<u64>()) {
            prop_assume!(th <= h && tw <= w);
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let f: Vec<f32> = (0..h * w * 3).map(|_| rng.gen()).collect();
            let out = rescale_spatial(&f, h, w, th, tw).unwrap();
            prop_assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
            let m_in: f64 = f.iter().map(|&v| v as f64).sum::<f64>() / f.len() as f64;
            let m_out: f64 = out.iter().map(|&v| v as f64).sum::<f64>() / out.len() as f64;
            prop_assert!((m_in - m_out).abs() < 1e-5);
        }
    }

    #[test]
    fn batch_shapes_follow_config() {
        let full = FidelityConfig::full(100, 224, 224).unwrap();
        let t = derive_config(FidelityKind::Temporal, &full, 1.0, 4.0).unwrap();
        // Shapes are checked at a reduced frame size to keep the test light; the
        // shape contract is independent of the pixel payload.
        let video = ramp_video(800, 24, 24);
        let small_full = FidelityConfig { h: 24, w: 24, ..full };
        let small_t = FidelityConfig { h: 24, w: 24, ..t };
        let refs = vec![&video; 2];
        let b = build_batch(&refs, &small_full, &SnippetPlan::default()).unwrap();
        assert_eq!(b.shape(), [2, 100, 8, 24, 24, 3]);
        assert_eq!(b.data.len(), b.shape().iter().product::<usize>());
        let b = build_batch(&refs, &small_t, &SnippetPlan::default()).unwrap();
        assert_eq!(b.shape(), [2, 25, 8, 24, 24, 3]);
        let one = FidelityConfig::full(1, 12, 12).unwrap();
        let b = build_batch(&[&video], &one, &SnippetPlan::default()).unwrap();
        assert_eq!(b.shape(), [1, 1, 8, 12, 12, 3]);
        assert!(b.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn paper_scale_batch_shape() {
        // (16, 100, 8, 224, 224, 3) would need ~7.7 GB, so only the shape rule is checked here
        let full = FidelityConfig::full(100, 224, 224).unwrap();
        let plan = SnippetPlan::default();
        assert_eq!(batch_shape(16, &full, &plan), [16, 100, 8, 224, 224, 3]);
        let t = derive_config(FidelityKind::Temporal, &full, 1.0, 4.0).unwrap();
        assert_eq!(batch_shape(16, &t, &plan), [16, 25, 8, 224, 224, 3]);
        let video = ramp_video(800, 10, 10);
        let small = FidelityConfig::full(7, 5, 4).unwrap();
        let b = build_batch(&[&video, &video], &small, &plan).unwrap();
        assert_eq!(b.shape(), batch_shape(2, &small, &plan));
        assert_eq!(b.item_len(), 7 * 8 * 5 * 4 * 3);
    }

    #[test]
    fn batch_is_deterministic() {
        let video = ramp_video(200, 8, 8);
        let cfg = FidelityConfig::full(10, 6, 6).unwrap();
        let a = build_batch(&[&video], &cfg, &SnippetPlan::default()).unwrap();
        let b = build_batch(&[&video], &cfg, &SnippetPlan::default()).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn timeline_round_trip() {
        let tl = SnippetTimeline::new(800, 25, 64).unwrap();
        for u in [0.0, 3.5, 24.0] {
            assert!((tl.snippet_of(tl.frame_of(u)).unwrap() - u).abs() < 1e-12);
        }
    }
}
