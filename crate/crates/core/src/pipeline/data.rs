//! Train/validation split, snippet caches and per-video targets.

use std::collections::{BTreeMap, HashMap};

use crate::domain::{AnnotationSet, PredictionSet, VideoPredictions};
use crate::error::{Error, Result};
use crate::fidelity::FidelityConfig;
use crate::models::anchors::AnchorTable;
use crate::models::decode::{decode_predictions, instances_to_snippets, TimeMapping};
use crate::models::encoder::Encoder;
use crate::models::head::TalHead;
use crate::models::loss::{assign_targets, AnchorTarget, LossConfig};
use crate::models::{encode_video, SnippetFeatures};
use crate::snippets::{video_snippets, SnippetPlan, SnippetTimeline};
use crate::synthgen::Dataset;
use crate::util::fnv1a64;

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
}

/// Videos whose id hashes to 0 modulo `modulus` go to validation.
pub fn split_ids<'a>(ids: impl IntoIterator<Item = &'a str>, modulus: u64) -> Split {
    let mut split = Split {
        train: Vec::new(),
        val: Vec::new(),
    };
    for id in ids {
        if fnv1a64(id.as_bytes()) % modulus == 0 {
            split.val.push(id.to_string());
        } else {
            split.train.push(id.to_string());
        }
    }
    split
}

pub fn time_mapping(dataset: &Dataset, id: &str, l: usize, plan: &SnippetPlan) -> Result<TimeMapping> {
    let video = dataset.video(id)?;
    let ann = &dataset.annotations.videos[id];
    Ok(TimeMapping {
        timeline: SnippetTimeline::new(video.frames, l, plan.window)?,
        fps: dataset.annotations.fps,
        duration: ann.duration,
    })
}

/// Anchor targets of one video at temporal length `anchors.l`.
pub fn video_targets(dataset: &Dataset, id: &str, anchors: &AnchorTable, plan: &SnippetPlan, loss: &LossConfig) -> Result<Vec<AnchorTarget>> {
    let map = time_mapping(dataset, id, anchors.l, plan)?;
    let gts = instances_to_snippets(&dataset.annotations.videos[id], &map);
    Ok(assign_targets(&anchors.anchors, &gts, loss.iou_pos, loss.iou_neg))
}

/// Lazily sampled snippet tensors per (video, resolution).
#[derive(Default)]
pub struct SnippetCache {
    entries: HashMap<(String, (usize, usize, usize)), Vec<f32>>,
}

impl SnippetCache {
    pub fn get(&mut self, dataset: &Dataset, id: &str, config: &FidelityConfig, plan: &SnippetPlan) -> Result<&[f32]> {
        let key = (id.to_string(), config.dims());
        if !self.entries.contains_key(&key) {
            let v = video_snippets(dataset.video(id)?, config, plan)?;
            self.entries.insert(key.clone(), v);
        }
        Ok(&self.entries[&key])
    }
}

/// Snippet features of every listed video at `config`, computed with a frozen encoder.
pub fn extract_features(
    encoder: &Encoder,
    dataset: &Dataset,
    ids: &[String],
    config: &FidelityConfig,
    plan: &SnippetPlan,
) -> Result<BTreeMap<String, SnippetFeatures>> {
    let mut out = BTreeMap::new();
    let (l, h, w) = config.dims();
    for (b, id) in ids.iter().enumerate() {
        let snippets = video_snippets(dataset.video(id)?, config, plan)?;
        let x = encode_video(encoder, &snippets, l, plan.frames_per_snippet(), h, w)?;
        if x.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                stage: "features",
                step: 0,
                batch: b,
                last_good_epoch: None,
            });
        }
        out.insert(id.clone(), x);
    }
    Ok(out)
}

/// Raw (not yet suppressed) predictions of `head` on precomputed features.
pub fn predict(
    head: &TalHead,
    features: &BTreeMap<String, SnippetFeatures>,
    anchors: &AnchorTable,
    dataset: &Dataset,
    plan: &SnippetPlan,
) -> Result<PredictionSet> {
    let gts: &AnnotationSet = &dataset.annotations;
    let mut set = PredictionSet::new(gts.classes.clone(), gts.fps);
    for (id, x) in features {
        let (out, _) = head.forward(x, anchors)?;
        let map = time_mapping(dataset, id, anchors.l, plan)?;
        set.videos.insert(
            id.clone(),
            VideoPredictions {
                duration: map.duration,
                predictions: decode_predictions(&out, anchors, &map),
            },
        );
    }
    Ok(set)
}
