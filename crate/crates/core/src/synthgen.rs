//! Synthetic untrimmed videos with planted, motion-coded action segments.
//!
//! Every video has a static random texture plus fresh per-frame Gaussian
//! noise. Each action instance is a bright square that wraps around the frame
//! while moving with a class-specific velocity; its appearance is identical for
//! all classes, so the class can only be read from motion. The square appears
//! on the first frame of the instance and disappears after the last.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::domain::{self, ActionInstance, AnnotationSet, Segment, VideoAnnotation};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::util::rng_for;

/// Intensity of the moving square. Background never exceeds `BACKGROUND_MAX` before noise.
pub const PATCH_VALUE: f32 = 0.95;
pub const BACKGROUND_MAX: f32 = 0.45;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub num_videos: usize,
    pub frames_per_video: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    pub min_instance_secs: f64,
    pub max_instance_secs: f64,
    pub fps: f64,
    pub noise_std: f64,
    /// Minimum number of background frames between consecutive instances.
    pub min_gap_frames: usize,
    pub seed: u64,
    pub id_prefix: String,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_videos: 64,
            frames_per_video: 800,
            height: 32,
            width: 32,
            num_classes: 4,
            min_instances: 1,
            max_instances: 3,
            min_instance_secs: 4.0,
            max_instance_secs: 10.0,
            fps: 25.0,
            noise_std: 0.05,
            min_gap_frames: 16,
            seed: 0,
            id_prefix: "video".into(),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self, window: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.frames_per_video < window {
            return bad(format!(
                "frames_per_video {} is shorter than the snippet window {window}",
                self.frames_per_video
            ));
        }
        if self.height == 0 || self.width == 0 {
            return bad("frame size must be positive".into());
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        if self.min_instances > self.max_instances {
            return bad("min_instances exceeds max_instances".into());
        }
        if !(self.min_instance_secs > 0.0 && self.min_instance_secs <= self.max_instance_secs) {
            return bad("instance length range must satisfy 0 < min <= max".into());
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return bad("fps must be positive".into());
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return bad("noise_std must be non-negative".into());
        }
        Ok(())
    }

    pub fn duration(&self) -> f64 {
        self.frames_per_video as f64 / self.fps
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.num_classes)
            .map(|k| {
                let dir = ["right", "down", "left", "up"][k % 4];
                match k / 4 {
                    0 => format!("move_{dir}"),
                    tier => format!("move_{dir}_x{}", tier + 1),
                }
            })
            .collect()
    }

    pub fn video_id(&self, index: usize) -> String {
        format!("{}_{index:04}", self.id_prefix)
    }
}

/// Pixel velocity per frame for a class.
pub fn class_velocity(label: usize) -> (f64, f64) {
    let speed = 1.0 + 0.5 * (label / 4) as f64;
    let (dx, dy) = [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)][label % 4];
    (dx * speed, dy * speed)
}

/// A decoded video: `frames × height × width × 3` values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawVideo {
    pub id: String,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl RawVideo {
    pub fn frame_len(&self) -> usize {
        self.height * self.width * 3
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            shape: vec![self.frames, self.height, self.width, 3],
            data: self.data.clone(),
        }
    }

    pub fn from_tensor(id: String, t: Tensor) -> Result<Self> {
        match t.shape.as_slice() {
            &[frames, height, width, 3] => Ok(Self {
                id,
                frames,
                height,
                width,
                data: t.data,
            }),
            other => Err(Error::Shape(format!(
                "video `{id}` has shape {other:?}, expected (T, H, W, 3)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub videos: BTreeMap<String, RawVideo>,
    pub annotations: AnnotationSet,
}

impl Dataset {
    pub fn video(&self, id: &str) -> Result<&RawVideo> {
        self.videos
            .get(id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown video `{id}`")))
    }
}

struct Planted {
    start: usize,
    end: usize,
    label: usize,
    origin: (f64, f64),
}

fn plan_instances(spec: &SynthSpec, index: usize, rng: &mut impl Rng) -> Result<Vec<Planted>> {
    let n = rng.gen_range(spec.min_instances..=spec.max_instances);
    if n == 0 {
        return Ok(Vec::new());
    }
    let lengths: Vec<usize> = (0..n)
        .map(|_| {
            let secs = rng.gen_range(spec.min_instance_secs..=spec.max_instance_secs);
            ((secs * spec.fps).round() as usize).max(1)
        })
        .collect();
    let occupied = lengths.iter().sum::<usize>() + (n - 1) * spec.min_gap_frames;
    if occupied > spec.frames_per_video {
        return Err(Error::Generation {
            video_index: index,
            message: format!(
                "{n} instances need {occupied} frames but the video has {}",
                spec.frames_per_video
            ),
        });
    }
    let free = spec.frames_per_video - occupied;
    let mut cuts: Vec<usize> = (0..n).map(|_| rng.gen_range(0..=free)).collect();
    cuts.sort_unstable();
    let mut planted = Vec::with_capacity(n);
    let mut cursor = 0;
    let mut prev_cut = 0;
    for (i, (&len, &cut)) in lengths.iter().zip(&cuts).enumerate() {
        cursor += cut - prev_cut;
        prev_cut = cut;
        if i > 0 {
            cursor += spec.min_gap_frames;
        }
        let label = rng.gen_range(0..spec.num_classes);
        let origin = (
            rng.gen_range(0.0..spec.width as f64),
            rng.gen_range(0.0..spec.height as f64),
        );
        planted.push(Planted {
            start: cursor,
            end: cursor + len,
            label,
            origin,
        });
        cursor += len;
    }
    Ok(planted)
}

fn render_video(spec: &SynthSpec, planted: &[Planted], rng: &mut impl Rng) -> Vec<f32> {
    let (h, w) = (spec.height, spec.width);
    let frame_len = h * w * 3;
    let texture: Vec<f32> = (0..frame_len)
        .map(|_| rng.gen_range(0.0..BACKGROUND_MAX))
        .collect();
    let side = (h.min(w) / 4).max(2);
    let noise = spec.noise_std as f32;
    let mut data = vec![0f32; spec.frames_per_video * frame_len];
    for (t, frame) in data.chunks_exact_mut(frame_len).enumerate() {
        for (px, tex) in frame.iter_mut().zip(&texture) {
            let n: f32 = if noise > 0.0 {
                StandardNormal.sample(rng)
            } else {
                0.0
            };
            *px = (tex + noise * n).clamp(0.0, 1.0);
        }
        if let Some(inst) = planted.iter().find(|p| p.start <= t && t < p.end) {
            let (vx, vy) = class_velocity(inst.label);
            let dt = (t - inst.start) as f64;
            let x0 = (inst.origin.0 + vx * dt).floor().rem_euclid(w as f64) as usize;
            let y0 = (inst.origin.1 + vy * dt).floor().rem_euclid(h as f64) as usize;
            for dy in 0..side {
                let y = (y0 + dy) % h;
                for dx in 0..side {
                    let x = (x0 + dx) % w;
                    let at = (y * w + x) * 3;
                    frame[at..at + 3].fill(PATCH_VALUE);
                }
            }
        }
    }
    data
}

/// Generates one video and its annotation. Depends only on `(spec, index)`.
pub fn generate_video(spec: &SynthSpec, index: usize) -> Result<(RawVideo, VideoAnnotation)> {
    let mut rng = rng_for(spec.seed, &format!("synth/{index}"));
    let planted = plan_instances(spec, index, &mut rng)?;
    let data = render_video(spec, &planted, &mut rng);
    let instances = planted
        .iter()
        .map(|p| {
            Ok(ActionInstance {
                segment: Segment::new(p.start as f64 / spec.fps, p.end as f64 / spec.fps)?,
                label: p.label,
            })
        })
        .collect::<Result<_>>()?;
    let video = RawVideo {
        id: spec.video_id(index),
        frames: spec.frames_per_video,
        height: spec.height,
        width: spec.width,
        data,
    };
    Ok((
        video,
        VideoAnnotation {
            duration: spec.duration(),
            instances,
        },
    ))
}

pub fn generate_dataset(spec: &SynthSpec, window: usize) -> Result<Dataset> {
    spec.validate(window)?;
    let mut annotations = AnnotationSet::new(spec.class_names(), spec.fps);
    let mut videos = BTreeMap::new();
    for index in 0..spec.num_videos {
        let (video, ann) = generate_video(spec, index)?;
        annotations.videos.insert(video.id.clone(), ann);
        videos.insert(video.id.clone(), video);
    }
    annotations.validate()?;
    Ok(Dataset {
        videos,
        annotations,
    })
}

pub const ANNOTATION_FILE: &str = "annotations.json";
pub const SPEC_FILE: &str = "synth_spec.json";
pub const VIDEO_DIR: &str = "videos";

pub fn save_dataset(dataset: &Dataset, spec: Option<&SynthSpec>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let video_dir = dir.join(VIDEO_DIR);
    fs::create_dir_all(&video_dir).map_err(|e| Error::io(&video_dir, e))?;
    for (id, video) in &dataset.videos {
        video.to_tensor().save(video_dir.join(format!("{id}.bin")))?;
    }
    domain::save_annotations(&dataset.annotations, dir.join(ANNOTATION_FILE))?;
    if let Some(spec) = spec {
        let path = dir.join(SPEC_FILE);
        let json = serde_json::to_string_pretty(spec).expect("spec serializes");
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let ann_path = dir.join(ANNOTATION_FILE);
    if !ann_path.exists() {
        return Err(Error::DatasetMissing(dir.to_path_buf()));
    }
    let annotations = domain::load_annotations(&ann_path)?;
    let mut videos = BTreeMap::new();
    for id in annotations.videos.keys() {
        let tensor = Tensor::load(dir.join(VIDEO_DIR).join(format!("{id}.bin")))?;
        let video = RawVideo::from_tensor(id.clone(), tensor)?;
        videos.insert(id.clone(), video);
    }
    Ok(Dataset {
        videos,
        annotations,
    })
}

/// A trimmed clip cut from one ground-truth instance.
#[derive(Debug, Clone)]
pub struct Clip {
    pub video: RawVideo,
    pub label: usize,
    pub source_video: String,
    pub instance_index: usize,
    /// Frame range `[start, end)` in the source video.
    pub source_frames: (usize, usize),
    /// Edge-replicated frames added to reach the snippet window.
    pub pad_before: usize,
    pub pad_after: usize,
}

impl Clip {
    pub fn padded(&self) -> bool {
        self.pad_before + self.pad_after > 0
    }
}

/// One clip per ground-truth instance, cropped to the instance's frames.
pub fn make_trimmed_clips(dataset: &Dataset, window: usize) -> Result<Vec<Clip>> {
    let fps = dataset.annotations.fps;
    let mut clips = Vec::new();
    for (id, ann) in &dataset.annotations.videos {
        let video = dataset.video(id)?;
        for (i, inst) in ann.instances.iter().enumerate() {
            let start = ((inst.segment.start() * fps).round() as usize).min(video.frames - 1);
            let end = ((inst.segment.end() * fps).round() as usize).clamp(start + 1, video.frames);
            let len = end - start;
            let missing = window.saturating_sub(len);
            let pad_before = missing / 2;
            let pad_after = missing - pad_before;
            let frame_len = video.frame_len();
            let mut data = Vec::with_capacity((len + missing) * frame_len);
            for _ in 0..pad_before {
                data.extend_from_slice(video.frame(start));
            }
            data.extend_from_slice(&video.data[start * frame_len..end * frame_len]);
            for _ in 0..pad_after {
                data.extend_from_slice(video.frame(end - 1));
            }
            clips.push(Clip {
                video: RawVideo {
                    id: format!("{id}#{i}"),
                    frames: len + missing,
                    height: video.height,
                    width: video.width,
                    data,
                },
                label: inst.label,
                source_video: id.clone(),
                instance_index: i,
                source_frames: (start, end),
                pad_before,
                pad_after,
            });
        }
    }
    Ok(clips)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthSpec {
        SynthSpec {
            num_videos: 4,
            frames_per_video: 200,
            height: 12,
            width: 12,
            num_classes: 3,
            min_instances: 2,
            max_instances: 2,
            min_instance_secs: 1.0,
            max_instance_secs: 2.0,
            fps: 25.0,
            noise_std: 0.0,
            min_gap_frames: 4,
            seed,
            id_prefix: "t".into(),
        }
    }

    #[test]
    fn zero_instances_gives_background_only() {
        let spec = SynthSpec {
            min_instances: 0,
            max_instances: 0,
            ..small(1)
        };
        let ds = generate_dataset(&spec, 64).unwrap();
        assert_eq!(ds.annotations.num_instances(), 0);
        for v in ds.videos.values() {
            assert!(v.data.iter().all(|&x| x <= BACKGROUND_MAX));
        }
    }

    #[test]
    fn instance_count_and_non_overlap() {
        let ds = generate_dataset(&small(3), 64).unwrap();
        assert_eq!(ds.annotations.num_instances(), 8);
        for ann in ds.annotations.videos.values() {
            let mut segs: Vec<_> = ann.instances.iter().map(|i| i.segment).collect();
            segs.sort_by(|a, b| a.start().total_cmp(&b.start()));
            for pair in segs.windows(2) {
                assert!(pair[0].end() <= pair[1].start());
            }
        }
    }

    #[test]
    fn infeasible_spec_names_video() {
        let spec = SynthSpec {
            min_instances: 5,
            max_instances: 5,
            min_instance_secs: 3.0,
            max_instance_secs: 3.0,
            ..small(0)
        };
        match generate_dataset(&spec, 64) {
            Err(Error::Generation { video_index, .. }) => assert_eq!(video_index, 0),
            other => panic!("expected generation error, got {other:?}"),
        }
    }

    #[test]
    fn same_seed_same_files() {
        let spec = small(9);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        save_dataset(&generate_dataset(&spec, 64).unwrap(), Some(&spec), a.path()).unwrap();
        save_dataset(&generate_dataset(&spec, 64).unwrap(), Some(&spec), b.path()).unwrap();
        for name in [ANNOTATION_FILE, SPEC_FILE, "videos/t_0002.bin"] {
            assert_eq!(
                fs::read(a.path().join(name)).unwrap(),
                fs::read(b.path().join(name)).unwrap(),
                "{name}"
            );
        }
        let loaded = load_dataset(a.path()).unwrap();
        assert_eq!(loaded.videos.len(), 4);
        assert_eq!(loaded.annotations, generate_dataset(&spec, 64).unwrap().annotations);
    }

    #[test]
    fn different_seed_different_videos() {
        let a = generate_video(&small(1), 0).unwrap().0;
        let b = generate_video(&small(2), 0).unwrap().0;
        assert_ne!(a.data, b.data);
    }

    /// Frames holding a saturated pixel must be exactly the annotated frames.
    #[test]
    fn pattern_detector_matches_annotations() {
        for seed in 0..5 {
            let spec = small(seed);
            let ds = generate_dataset(&spec, 64).unwrap();
            for (id, video) in &ds.videos {
                let ann = &ds.annotations.videos[id];
                for t in 0..video.frames {
                    let detected = video.frame(t).iter().any(|&v| v > 0.9);
                    let annotated = ann.instances.iter().any(|i| {
                        let s = (i.segment.start() * spec.fps).round() as usize;
                        let e = (i.segment.end() * spec.fps).round() as usize;
                        s <= t && t < e
                    });
                    assert_eq!(detected, annotated, "video {id} frame {t}");
                }
            }
        }
    }

    #[test]
    fn patch_moves_with_class_velocity() {
        let spec = SynthSpec {
            min_instances: 1,
            max_instances: 1,
            ..small(4)
        };
        let (video, ann) = generate_video(&spec, 0).unwrap();
        let inst = ann.instances[0];
        let s = (inst.segment.start() * spec.fps).round() as usize;
        let bright = |t: usize| -> Vec<usize> {
            (0..spec.height * spec.width)
                .filter(|p| video.frame(t)[p * 3] > 0.9)
                .collect()
        };
        let (vx, vy) = class_velocity(inst.label);
        let a = bright(s);
        let b = bright(s + 4);
        // 4 frames at unit speed shift the square by exactly 4 pixels (mod wrap).
        let shift = |p: usize| {
            let (y, x) = (p / spec.width, p % spec.width);
            let x = (x as i64 + (vx * 4.0) as i64).rem_euclid(spec.width as i64) as usize;
            let y = (y as i64 + (vy * 4.0) as i64).rem_euclid(spec.height as i64) as usize;
            y * spec.width + x
        };
        let mut moved: Vec<usize> = a.iter().map(|&p| shift(p)).collect();
        moved.sort_unstable();
        // floor() of the fractional origin can shift by one pixel; compare sizes and overlap
        assert_eq!(moved.len(), b.len());
        let overlap = moved.iter().filter(|p| b.contains(p)).count();
        assert!(overlap * 2 >= b.len());
    }

    #[test]
    fn clips_follow_instances() {
        let ds = generate_dataset(&small(5), 64).unwrap();
        let clips = make_trimmed_clips(&ds, 64).unwrap();
        assert_eq!(clips.len(), ds.annotations.num_instances());
        for clip in &clips {
            let inst = ds.annotations.videos[&clip.source_video].instances[clip.instance_index];
            assert_eq!(clip.label, inst.label);
            assert!(clip.video.frames >= 64);
            let (s, e) = clip.source_frames;
            assert_eq!(clip.video.frames, (e - s).max(64));
            assert_eq!(clip.padded(), e - s < 64);
            // first unpadded frame equals the source frame
            let src = ds.video(&clip.source_video).unwrap();
            assert_eq!(clip.video.frame(clip.pad_before), src.frame(s));
        }
    }

    #[test]
    fn exact_window_clip_is_not_padded() {
        let spec = SynthSpec {
            min_instances: 1,
            max_instances: 1,
            min_instance_secs: 64.0 / 25.0,
            max_instance_secs: 64.0 / 25.0,
            ..small(6)
        };
        let ds = generate_dataset(&spec, 64).unwrap();
        let clips = make_trimmed_clips(&ds, 64).unwrap();
        assert!(clips.iter().all(|c| c.video.frames == 64 && !c.padded()));
    }
}
