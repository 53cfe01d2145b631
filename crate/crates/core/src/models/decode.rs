//! Turning head outputs back into timed predictions, and ground truth into
//! snippet coordinates.

use super::anchors::AnchorTable;
use super::head::HeadOutput;
use super::loss::{softmax, SnippetInstance};
use crate::domain::{Prediction, Segment, VideoAnnotation};
use crate::snippets::SnippetTimeline;

/// Maps between seconds and fractional snippet indices for one video at one `L`.
#[derive(Debug, Clone, Copy)]
pub struct TimeMapping {
    pub timeline: SnippetTimeline,
    pub fps: f64,
    pub duration: f64,
}

impl TimeMapping {
    pub fn seconds(&self, u: f64) -> f64 {
        (self.timeline.frame_of(u) / self.fps).clamp(0.0, self.duration)
    }

    pub fn snippet(&self, seconds: f64) -> f64 {
        self.timeline
            .snippet_of(seconds * self.fps)
            .unwrap_or(0.0)
    }

    /// Width of one snippet step in seconds.
    pub fn snippet_seconds(&self) -> f64 {
        self.timeline.spacing / self.fps
    }
}

/// Ground-truth instances in snippet coordinates.
pub fn instances_to_snippets(ann: &VideoAnnotation, map: &TimeMapping) -> Vec<SnippetInstance> {
    ann.instances
        .iter()
        .map(|i| SnippetInstance {
            start: map.snippet(i.segment.start()),
            end: map.snippet(i.segment.end()),
            label: i.label,
        })
        .collect()
}

/// One prediction per anchor whose most likely class is not background and
/// whose adjusted span is non-empty. Score is the softmax probability of that class.
pub fn decode_predictions(out: &HeadOutput, anchors: &AnchorTable, map: &TimeMapping) -> Vec<Prediction> {
    let mut preds = Vec::new();
    for (a, anchor) in anchors.anchors.iter().enumerate() {
        let probs = softmax(out.logits_of(a));
        let mut best = 0;
        for (k, p) in probs.iter().enumerate() {
            if *p > probs[best] {
                best = k;
            }
        }
        if best == 0 {
            continue;
        }
        let s = map.seconds(anchor.start as f64 + out.offsets[a * 2]);
        let e = map.seconds(anchor.end as f64 + out.offsets[a * 2 + 1]);
        let Ok(segment) = Segment::new(s, e) else {
            continue;
        };
        preds.push(Prediction {
            segment,
            label: best - 1,
            score: probs[best].clamp(0.0, 1.0),
        });
    }
    preds
}
