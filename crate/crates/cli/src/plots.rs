//! Static SVG plots for `report --plots`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use lofi_core::pipeline::run::{read_jsonl, write_text};
use lofi_core::Result;

const W: f64 = 720.0;
const H: f64 = 360.0;
const MARGIN: f64 = 48.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

struct Series {
    name: String,
    loss: Vec<f64>,
    kinds: Vec<String>,
}

fn load_series(runs: &[PathBuf]) -> Result<Vec<Series>> {
    let mut out = Vec::new();
    for run in runs {
        let log = run.join("logs").join("stage2.jsonl");
        if !log.exists() {
            continue;
        }
        let records = read_jsonl(&log)?;
        out.push(Series {
            name: run.file_name().map_or_else(|| run.display().to_string(), |n| n.to_string_lossy().into_owned()),
            loss: records.iter().map(|r| r["loss"].as_f64().unwrap_or(f64::NAN)).collect(),
            kinds: records.iter().map(|r| r["kind"].as_str().unwrap_or("").to_string()).collect(),
        });
    }
    Ok(out)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(title: &str, height: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{height}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        W / 2.0,
        escape(title)
    )
}

pub fn loss_svg(series: &[(String, Vec<f64>)]) -> String {
    let mut s = header("Stage-2 training loss", H);
    let n = series.iter().map(|(_, v)| v.len()).max().unwrap_or(0).max(2);
    let finite = series.iter().flat_map(|(_, v)| v.iter().copied()).filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else { (0.0, 1.0) };
    let x = |i: usize| MARGIN + (W - 2.0 * MARGIN) * i as f64 / (n - 1) as f64;
    let y = |v: f64| H - MARGIN - (H - 2.0 * MARGIN) * (v - lo) / (hi - lo);
    let _ = writeln!(
        s,
        "<line x1=\"{MARGIN}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>\n<line x1=\"{MARGIN}\" y1=\"{MARGIN}\" x2=\"{MARGIN}\" y2=\"{0}\" stroke=\"black\"/>",
        H - MARGIN,
        W - MARGIN
    );
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{hi:.3}</text>", MARGIN - 4.0, MARGIN + 4.0);
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{lo:.3}</text>", MARGIN - 4.0, H - MARGIN);
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">step</text>", W / 2.0, H - 12.0);
    for (k, (name, v)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<String> = v
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_finite())
            .map(|(i, &l)| format!("{:.1},{:.1}", x(i), y(l)))
            .collect();
        let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>", pts.join(" "));
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\" text-anchor=\"end\">{}</text>",
            W - MARGIN,
            MARGIN + 14.0 * k as f64,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn kind_color(kind: &str) -> &'static str {
    match kind {
        "spatial" => "#4e79a7",
        "temporal" => "#f28e2b",
        "spatiotemporal" => "#59a14f",
        _ => "#bab0ac",
    }
}

/// One row per run, one cell per step colored by fidelity kind.
pub fn timeline_svg(series: &[(String, Vec<String>)]) -> String {
    let row = 28.0;
    let height = 2.0 * MARGIN + row * series.len() as f64 + 20.0;
    let mut s = header("Fidelity configuration per step", height);
    let n = series.iter().map(|(_, v)| v.len()).max().unwrap_or(1).max(1);
    let cell = (W - 2.0 * MARGIN - 80.0) / n as f64;
    for (r, (name, kinds)) in series.iter().enumerate() {
        let y0 = MARGIN + row * r as f64;
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>", MARGIN + 76.0, y0 + 16.0, escape(name));
        for (i, k) in kinds.iter().enumerate() {
            let _ = writeln!(
                s,
                "<rect x=\"{:.2}\" y=\"{y0}\" width=\"{:.2}\" height=\"{}\" fill=\"{}\"/>",
                MARGIN + 80.0 + cell * i as f64,
                cell,
                row - 6.0,
                kind_color(k)
            );
        }
    }
    let ly = height - MARGIN + 10.0;
    for (i, k) in ["spatial", "temporal", "spatiotemporal"].iter().enumerate() {
        let lx = MARGIN + 80.0 + 140.0 * i as f64;
        let _ = writeln!(s, "<rect x=\"{lx}\" y=\"{}\" width=\"12\" height=\"12\" fill=\"{}\"/>", ly - 10.0, kind_color(k));
        let _ = writeln!(s, "<text x=\"{}\" y=\"{ly}\">{k}</text>", lx + 16.0);
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `stage2_loss.svg` and `fidelity_timeline.svg` under `dir`. Runs
/// without a stage-2 log are left out; nothing is written if none has one.
pub fn write_plots(runs: &[PathBuf], dir: &Path) -> Result<Vec<PathBuf>> {
    let series = load_series(runs)?;
    if series.is_empty() {
        return Ok(Vec::new());
    }
    let loss: Vec<(String, Vec<f64>)> = series.iter().map(|s| (s.name.clone(), s.loss.clone())).collect();
    let kinds: Vec<(String, Vec<String>)> = series.iter().map(|s| (s.name.clone(), s.kinds.clone())).collect();
    let a = dir.join("stage2_loss.svg");
    let b = dir.join("fidelity_timeline.svg");
    write_text(&a, &loss_svg(&loss))?;
    write_text(&b, &timeline_svg(&kinds))?;
    Ok(vec![a, b])
}
