//! Post-processing and localization metrics.

pub mod metrics;
pub mod nms;

use serde::{Deserialize, Serialize};

pub use metrics::{ar_auc, average_precision, iou_grid, map_report, metric_report, MetricReport, AR_KS};
pub use nms::{soft_nms, soft_nms_limited, top_k, NmsConfig, NmsMethod};

use crate::domain::{AnnotationSet, PredictionSet};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub nms: NmsConfig,
    pub top_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            nms: NmsConfig::default(),
            top_k: 100,
        }
    }
}

/// Soft-NMS then top-k, per video.
pub fn postprocess(preds: &PredictionSet, cfg: &EvalConfig) -> PredictionSet {
    let mut out = preds.clone();
    for v in out.videos.values_mut() {
        v.predictions = soft_nms_limited(&v.predictions, &cfg.nms, cfg.top_k);
    }
    out
}

/// Post-processes raw predictions and scores them on the standard grid.
pub fn evaluate(preds: &PredictionSet, gts: &AnnotationSet, cfg: &EvalConfig) -> Result<MetricReport> {
    metric_report(&postprocess(preds, cfg), gts, &iou_grid())
}

/// Fixed-width table with columns `0.5 | 0.75 | 0.95 | Average`, values in percent.
pub fn format_table(rows: &[(String, [f64; 4])]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(6);
    let mut s = format!(
        "{:<width$} | {:>7} | {:>7} | {:>7} | {:>7}\n",
        "Method", "0.5", "0.75", "0.95", "Average"
    );
    s.push_str(&format!("{}-+-{}-+-{}-+-{}-+-{}\n", "-".repeat(width), "-".repeat(7), "-".repeat(7), "-".repeat(7), "-".repeat(7)));
    for (name, v) in rows {
        s.push_str(&format!(
            "{:<width$} | {:>7.2} | {:>7.2} | {:>7.2} | {:>7.2}\n",
            name,
            100.0 * v[0],
            100.0 * v[1],
            100.0 * v[2],
            100.0 * v[3]
        ));
    }
    s
}
