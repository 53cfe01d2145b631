//! Value types for ground truth and predictions, 1-D segment geometry, and
//! the annotation / prediction JSON formats.
//!
//! Times are seconds throughout. Conversion to snippet coordinates happens
//! only in [`crate::models`] and [`crate::eval`].

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer};

use crate::error::{Error, Result};

/// Half-open temporal interval `[start, end)` in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    start: f64,
    end: f64,
}

impl Segment {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !start.is_finite() || !end.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "segment bounds must be finite, got [{start}, {end}]"
            )));
        }
        if start < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "segment start must be non-negative, got {start}"
            )));
        }
        if end <= start {
            return Err(Error::InvalidArgument(format!(
                "segment end must exceed start, got [{start}, {end}]"
            )));
        }
        Ok(Self { start, end })
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn end(&self) -> f64 {
        self.end
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }
}

/// Intersection over union of two temporal segments.
pub fn iou_1d(a: &Segment, b: &Segment) -> f64 {
    iou_raw(a.start, a.end, b.start, b.end)
}

/// IoU on raw bounds. Both intervals must have positive length.
pub(crate) fn iou_raw(a_start: f64, a_end: f64, b_start: f64, b_end: f64) -> f64 {
    let inter = (a_end.min(b_end) - a_start.max(b_start)).max(0.0);
    if inter == 0.0 {
        return 0.0;
    }
    let union = (a_end - a_start) + (b_end - b_start) - inter;
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionInstance {
    pub segment: Segment,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoAnnotation {
    pub duration: f64,
    pub instances: Vec<ActionInstance>,
}

/// Ground truth for a collection of untrimmed videos.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationSet {
    pub classes: Vec<String>,
    pub fps: f64,
    pub videos: BTreeMap<String, VideoAnnotation>,
}

impl AnnotationSet {
    pub fn new(classes: Vec<String>, fps: f64) -> Self {
        Self {
            classes,
            fps,
            videos: BTreeMap::new(),
        }
    }

    pub fn num_instances(&self) -> usize {
        self.videos.values().map(|v| v.instances.len()).sum()
    }

    /// Checks every type invariant, naming the first offending video and instance.
    pub fn validate(&self) -> Result<()> {
        check_header(&self.classes, self.fps)?;
        for (id, video) in &self.videos {
            check_duration(id, video.duration)?;
            for (i, inst) in video.instances.iter().enumerate() {
                check_placement(id, i, &inst.segment, inst.label, video.duration, self.classes.len())?;
            }
        }
        Ok(())
    }

    /// Keeps only the listed videos.
    pub fn subset<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Self {
        let mut out = Self::new(self.classes.clone(), self.fps);
        for id in ids {
            if let Some(v) = self.videos.get(id) {
                out.videos.insert(id.to_string(), v.clone());
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub segment: Segment,
    pub label: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoPredictions {
    pub duration: f64,
    pub predictions: Vec<Prediction>,
}

/// Model outputs for a collection of videos.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub classes: Vec<String>,
    pub fps: f64,
    pub videos: BTreeMap<String, VideoPredictions>,
}

impl PredictionSet {
    pub fn new(classes: Vec<String>, fps: f64) -> Self {
        Self {
            classes,
            fps,
            videos: BTreeMap::new(),
        }
    }

    pub fn num_predictions(&self) -> usize {
        self.videos.values().map(|v| v.predictions.len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        check_header(&self.classes, self.fps)?;
        for (id, video) in &self.videos {
            check_duration(id, video.duration)?;
            for (i, p) in video.predictions.iter().enumerate() {
                check_placement(id, i, &p.segment, p.label, video.duration, self.classes.len())?;
                if !(0.0..=1.0).contains(&p.score) {
                    return Err(Error::Validation {
                        video: id.clone(),
                        index: Some(i),
                        message: format!("score {} outside [0, 1]", p.score),
                    });
                }
            }
        }
        Ok(())
    }

    /// Every referenced video must exist in the ground truth.
    pub fn check_against(&self, gts: &AnnotationSet) -> Result<()> {
        for id in self.videos.keys() {
            if !gts.videos.contains_key(id) {
                return Err(Error::Validation {
                    video: id.clone(),
                    index: None,
                    message: "video not present in the annotation set".into(),
                });
            }
        }
        Ok(())
    }
}

fn check_header(classes: &[String], fps: f64) -> Result<()> {
    if !(fps.is_finite() && fps > 0.0) {
        return Err(Error::InvalidArgument(format!("fps must be positive, got {fps}")));
    }
    if classes.is_empty() {
        return Err(Error::InvalidArgument("class table is empty".into()));
    }
    Ok(())
}

fn check_duration(id: &str, duration: f64) -> Result<()> {
    if !(duration.is_finite() && duration > 0.0) {
        return Err(Error::Validation {
            video: id.to_string(),
            index: None,
            message: format!("duration must be positive, got {duration}"),
        });
    }
    Ok(())
}

fn check_placement(
    id: &str,
    index: usize,
    seg: &Segment,
    label: usize,
    duration: f64,
    num_classes: usize,
) -> Result<()> {
    let fail = |message: String| Error::Validation {
        video: id.to_string(),
        index: Some(index),
        message,
    };
    if seg.end() > duration {
        return Err(fail(format!(
            "segment [{}, {}] exceeds duration {duration}",
            seg.start(),
            seg.end()
        )));
    }
    if label >= num_classes {
        return Err(fail(format!(
            "label {label} out of range for {num_classes} classes"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// JSON I/O
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
struct RawFile<V> {
    classes: Vec<String>,
    fps: f64,
    videos: UniqueMap<V>,
}

#[derive(Deserialize)]
struct RawAnnotatedVideo {
    duration: f64,
    annotations: Vec<RawInstance>,
}

#[derive(Deserialize)]
struct RawPredictedVideo {
    duration: f64,
    predictions: Vec<RawPrediction>,
}

#[derive(Deserialize)]
struct RawInstance {
    segment: [f64; 2],
    label: usize,
}

#[derive(Deserialize)]
struct RawPrediction {
    segment: [f64; 2],
    label: usize,
    score: f64,
}

/// JSON object that rejects repeated keys instead of keeping the last one.
struct UniqueMap<V>(Vec<(String, V)>);

impl<'de, V: Deserialize<'de>> Deserialize<'de> for UniqueMap<V> {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct MapVisitor<V>(std::marker::PhantomData<V>);

        impl<'de, V: Deserialize<'de>> Visitor<'de> for MapVisitor<V> {
            type Value = UniqueMap<V>;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a map of video ids")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> Result<Self::Value, A::Error> {
                let mut seen = std::collections::BTreeSet::new();
                let mut entries = Vec::new();
                while let Some((key, value)) = access.next_entry::<String, V>()? {
                    if !seen.insert(key.clone()) {
                        return Err(serde::de::Error::custom(format!("duplicate video id `{key}`")));
                    }
                    entries.push((key, value));
                }
                Ok(UniqueMap(entries))
            }
        }

        deserializer.deserialize_map(MapVisitor(std::marker::PhantomData))
    }
}

fn parse_json<T: for<'de> Deserialize<'de>>(path: &Path, bytes: &[u8]) -> Result<T> {
    serde_json::from_slice(bytes).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        offset: byte_offset(bytes, e.line(), e.column()),
        message: e.to_string(),
    })
}

/// Converts serde_json's 1-based line/column into a byte offset.
fn byte_offset(bytes: &[u8], line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let mut offset = 0;
    for (i, l) in bytes.split(|&b| b == b'\n').enumerate() {
        if i + 1 == line {
            return (offset + column.saturating_sub(1)).min(bytes.len());
        }
        offset += l.len() + 1;
    }
    bytes.len()
}

fn segment_from(id: &str, index: usize, raw: [f64; 2]) -> Result<Segment> {
    Segment::new(raw[0], raw[1]).map_err(|e| Error::Validation {
        video: id.to_string(),
        index: Some(index),
        message: match e {
            Error::InvalidArgument(m) => m,
            other => other.to_string(),
        },
    })
}

pub fn parse_annotations(path: &Path, bytes: &[u8]) -> Result<AnnotationSet> {
    let raw: RawFile<RawAnnotatedVideo> = parse_json(path, bytes)?;
    let mut set = AnnotationSet::new(raw.classes, raw.fps);
    for (id, video) in raw.videos.0 {
        let mut instances = Vec::with_capacity(video.annotations.len());
        for (i, inst) in video.annotations.into_iter().enumerate() {
            instances.push(ActionInstance {
                segment: segment_from(&id, i, inst.segment)?,
                label: inst.label,
            });
        }
        set.videos.insert(
            id,
            VideoAnnotation {
                duration: video.duration,
                instances,
            },
        );
    }
    set.validate()?;
    Ok(set)
}

pub fn parse_predictions(path: &Path, bytes: &[u8]) -> Result<PredictionSet> {
    let raw: RawFile<RawPredictedVideo> = parse_json(path, bytes)?;
    let mut set = PredictionSet::new(raw.classes, raw.fps);
    for (id, video) in raw.videos.0 {
        let mut predictions = Vec::with_capacity(video.predictions.len());
        for (i, p) in video.predictions.into_iter().enumerate() {
            predictions.push(Prediction {
                segment: segment_from(&id, i, p.segment)?,
                label: p.label,
                score: p.score,
            });
        }
        set.videos.insert(
            id,
            VideoPredictions {
                duration: video.duration,
                predictions,
            },
        );
    }
    set.validate()?;
    Ok(set)
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<AnnotationSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(path, &bytes)
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<PredictionSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_predictions(path, &bytes)
}

fn num(out: &mut String, v: f64) {
    // Fixed precision keeps the output byte-stable; "-0.000000" is normalized.
    let s = format!("{v:.6}");
    if s == "-0.000000" {
        out.push_str("0.000000");
    } else {
        out.push_str(&s);
    }
}

fn string(out: &mut String, s: &str) {
    out.push_str(&serde_json::to_string(s).expect("string serialization is infallible"));
}

fn header(out: &mut String, classes: &[String], fps: f64) {
    out.push_str("{\n  \"classes\": [");
    for (i, c) in classes.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        string(out, c);
    }
    out.push_str("],\n  \"fps\": ");
    num(out, fps);
    out.push_str(",\n  \"videos\": {");
}

/// Serializes with sorted video ids and six decimal places.
pub fn annotations_to_json(set: &AnnotationSet) -> String {
    let mut out = String::new();
    header(&mut out, &set.classes, set.fps);
    for (vi, (id, video)) in set.videos.iter().enumerate() {
        out.push_str(if vi == 0 { "\n    " } else { ",\n    " });
        string(&mut out, id);
        out.push_str(": {\"duration\": ");
        num(&mut out, video.duration);
        out.push_str(", \"annotations\": [");
        for (i, inst) in video.instances.iter().enumerate() {
            out.push_str(if i == 0 { "\n      " } else { ",\n      " });
            out.push_str("{\"segment\": [");
            num(&mut out, inst.segment.start());
            out.push_str(", ");
            num(&mut out, inst.segment.end());
            let _ = write!(out, "], \"label\": {}}}", inst.label);
        }
        out.push_str(if video.instances.is_empty() { "]}" } else { "\n    ]}" });
    }
    out.push_str(if set.videos.is_empty() { "}\n}\n" } else { "\n  }\n}\n" });
    out
}

pub fn predictions_to_json(set: &PredictionSet) -> String {
    let mut out = String::new();
    header(&mut out, &set.classes, set.fps);
    for (vi, (id, video)) in set.videos.iter().enumerate() {
        out.push_str(if vi == 0 { "\n    " } else { ",\n    " });
        string(&mut out, id);
        out.push_str(": {\"duration\": ");
        num(&mut out, video.duration);
        out.push_str(", \"predictions\": [");
        for (i, p) in video.predictions.iter().enumerate() {
            out.push_str(if i == 0 { "\n      " } else { ",\n      " });
            out.push_str("{\"segment\": [");
            num(&mut out, p.segment.start());
            out.push_str(", ");
            num(&mut out, p.segment.end());
            let _ = write!(out, "], \"label\": {}, \"score\": ", p.label);
            num(&mut out, p.score);
            out.push('}');
        }
        out.push_str(if video.predictions.is_empty() { "]}" } else { "\n    ]}" });
    }
    out.push_str(if set.videos.is_empty() { "}\n}\n" } else { "\n  }\n}\n" });
    out
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn save_annotations(set: &AnnotationSet, path: impl AsRef<Path>) -> Result<()> {
    set.validate()?;
    write_file(path.as_ref(), &annotations_to_json(set))
}

pub fn save_predictions(set: &PredictionSet, path: impl AsRef<Path>) -> Result<()> {
    set.validate()?;
    write_file(path.as_ref(), &predictions_to_json(set))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seg(s: f64, e: f64) -> Segment {
        Segment::new(s, e).unwrap()
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou_1d(&seg(2.0, 4.0), &seg(2.0, 4.0)), 1.0);
        assert_eq!(iou_1d(&seg(0.0, 1.0), &seg(2.0, 3.0)), 0.0);
        assert!((iou_1d(&seg(0.0, 10.0), &seg(5.0, 15.0)) - 1.0 / 3.0).abs() < 1e-15);
        // touching intervals share no length
        assert_eq!(iou_1d(&seg(0.0, 1.0), &seg(1.0, 2.0)), 0.0);
    }

    #[test]
    fn invalid_segments_rejected() {
        assert!(Segment::new(2.0, 2.0).is_err());
        assert!(Segment::new(3.0, 2.0).is_err());
        assert!(Segment::new(-1.0, 2.0).is_err());
        assert!(Segment::new(0.0, f64::INFINITY).is_err());
        assert!(Segment::new(f64::NAN, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in 0.0f64..50.0, la in 0.01f64..20.0, b in 0.0f64..50.0, lb in 0.01f64..20.0) {
            let x = seg(a, a + la);
            let y = seg(b, b + lb);
            let xy = iou_1d(&x, &y);
            prop_assert_eq!(xy, iou_1d(&y, &x));
            prop_assert!((0.0..=1.0).contains(&xy));
            prop_assert_eq!(iou_1d(&x, &x), 1.0);
        }
    }

    const MINIMAL: &str = r#"{"classes": ["jump"], "fps": 25, "videos": {"v1": {"duration": 10.0, "annotations": [{"segment": [1.5, 4.0], "label": 0}]}}}"#;

    #[test]
    fn parse_minimal_file() {
        let set = parse_annotations(Path::new("mem"), MINIMAL.as_bytes()).unwrap();
        assert_eq!(set.videos.len(), 1);
        assert_eq!(set.num_instances(), 1);
        let inst = set.videos["v1"].instances[0];
        assert_eq!(inst.segment, seg(1.5, 4.0));
    }

    #[test]
    fn segment_beyond_duration_names_video_and_index() {
        let text = r#"{"classes": ["a"], "fps": 25, "videos": {"clip7": {"duration": 10.0, "annotations": [{"segment": [1, 2], "label": 0}, {"segment": [3.0, 12.0], "label": 0}]}}}"#;
        match parse_annotations(Path::new("mem"), text.as_bytes()) {
            Err(Error::Validation { video, index, .. }) => {
                assert_eq!(video, "clip7");
                assert_eq!(index, Some(1));
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn zero_length_segment_rejected_at_parse() {
        let text = r#"{"classes": ["a"], "fps": 25, "videos": {"v": {"duration": 10.0, "annotations": [{"segment": [3, 3], "label": 0}]}}}"#;
        assert!(matches!(
            parse_annotations(Path::new("mem"), text.as_bytes()),
            Err(Error::Validation { index: Some(0), .. })
        ));
    }

    #[test]
    fn label_out_of_range_rejected() {
        let text = r#"{"classes": ["a"], "fps": 25, "videos": {"v": {"duration": 10.0, "annotations": [{"segment": [1, 3], "label": 1}]}}}"#;
        assert!(parse_annotations(Path::new("mem"), text.as_bytes()).is_err());
    }

    #[test]
    fn malformed_json_reports_byte_offset() {
        let text = "{\"classes\": [\"a\"],\n \"fps\": 25,\n \"videos\": {\"v\": oops}}";
        match parse_annotations(Path::new("mem"), text.as_bytes()) {
            Err(Error::Parse { offset, .. }) => {
                let at = text.find("oops").unwrap();
                assert!(offset >= at && offset <= at + 4, "offset {offset} vs {at}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_video_ids_rejected() {
        let text = r#"{"classes": ["a"], "fps": 25, "videos": {"v": {"duration": 1, "annotations": []}, "v": {"duration": 2, "annotations": []}}}"#;
        assert!(matches!(
            parse_annotations(Path::new("mem"), text.as_bytes()),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn empty_set_serializes_to_empty_map() {
        let set = AnnotationSet::new(vec!["a".into()], 25.0);
        let json = annotations_to_json(&set);
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["videos"], serde_json::json!({}));
        let back = parse_annotations(Path::new("mem"), json.as_bytes()).unwrap();
        assert_eq!(back, set);
    }

    #[test]
    fn prediction_score_out_of_range_rejected() {
        let text = r#"{"classes": ["a"], "fps": 25, "videos": {"v": {"duration": 10, "predictions": [{"segment": [1, 2], "label": 0, "score": 1.5}]}}}"#;
        assert!(parse_predictions(Path::new("mem"), text.as_bytes()).is_err());
    }

    fn micro(k: u32) -> f64 {
        f64::from(k) / 1e6
    }

    prop_compose! {
        fn annotation_set()(videos in proptest::collection::btree_map("[a-z]{1,6}", proptest::collection::vec((0u32..5_000_000, 1u32..5_000_000, 0usize..3), 0..5), 0..5)) -> AnnotationSet {
            let mut set = AnnotationSet::new(vec!["a".into(), "b\"q".into(), "c".into()], 30.0);
            for (id, insts) in videos {
                let instances = insts.iter().map(|&(s, l, label)| ActionInstance {
                    segment: Segment::new(micro(s), micro(s + l)).unwrap(),
                    label,
                }).collect();
                set.videos.insert(id, VideoAnnotation { duration: 10.0, instances });
            }
            set
        }
    }

    proptest! {
        #[test]
        fn annotation_round_trip_and_determinism(set in annotation_set()) {
            let dir = tempfile::tempdir().unwrap();
            let p1 = dir.path().join("a.json");
            let p2 = dir.path().join("b.json");
            save_annotations(&set, &p1).unwrap();
            save_annotations(&set, &p2).unwrap();
            prop_assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
            prop_assert_eq!(load_annotations(&p1).unwrap(), set);
        }

        #[test]
        fn prediction_round_trip(set in annotation_set(), scores in proptest::collection::vec(0u32..=1_000_000, 32)) {
            let mut preds = PredictionSet::new(set.classes.clone(), set.fps);
            let mut k = 0;
            for (id, v) in &set.videos {
                let predictions = v.instances.iter().map(|inst| {
                    k += 1;
                    Prediction { segment: inst.segment, label: inst.label, score: micro(scores[k % scores.len()]) }
                }).collect();
                preds.videos.insert(id.clone(), VideoPredictions { duration: v.duration, predictions });
            }
            let json = predictions_to_json(&preds);
            prop_assert_eq!(parse_predictions(Path::new("mem"), json.as_bytes()).unwrap(), preds);
        }
    }
}
