//! SVG line charts and a plain-text summary from telemetry CSVs.
//!
//! Output depends only on the input bytes and labels: coordinates are
//! rendered with fixed precision and no timestamps are written.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{LabError, Result};

use super::telemetry::{final_window_mean, Table, COLUMNS};

pub const WIDTH: f64 = 720.0;
pub const HEIGHT: f64 = 440.0;
pub const PLOT_LEFT: f64 = 80.0;
pub const PLOT_RIGHT: f64 = 540.0;
pub const PLOT_TOP: f64 = 50.0;
pub const PLOT_BOTTOM: f64 = 390.0;
/// Smoothing window as a fraction of the number of steps.
pub const SMOOTHING_FRACTION: f64 = 0.05;
/// Fraction of final steps averaged in the summary.
pub const SUMMARY_WINDOW: f64 = 0.1;
const TICKS: usize = 5;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Every column except `step` gets its own chart.
pub fn series() -> impl Iterator<Item = &'static str> {
    COLUMNS.iter().copied().filter(|c| *c != "step")
}

/// Half-width of the centered moving-average window for `n` points; the
/// full window is `2 * half + 1` points, about 5% of `n`.
pub fn smoothing_half_width(n: usize) -> usize {
    let k = (n as f64 * SMOOTHING_FRACTION).round() as usize;
    k / 2
}

/// Centered moving average, truncated at the ends.
pub fn smooth(values: &[f64]) -> Vec<f64> {
    let half = smoothing_half_width(values.len());
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(values.len());
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// Data range `[lo, hi]` widened to a non-empty interval.
fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if !lo.is_finite() || !hi.is_finite() {
        (0.0, 1.0)
    } else if hi - lo <= 0.0 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// Affine map from data space onto the plot rectangle (y grows downwards).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
}

impl Frame {
    pub fn x(&self, v: f64) -> f64 {
        let (a, b) = self.x_range;
        PLOT_LEFT + (v - a) / (b - a) * (PLOT_RIGHT - PLOT_LEFT)
    }

    pub fn y(&self, v: f64) -> f64 {
        let (a, b) = self.y_range;
        PLOT_BOTTOM - (v - a) / (b - a) * (PLOT_BOTTOM - PLOT_TOP)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// One chart of `column` with one smoothed line per labelled table.
pub fn render_svg(column: &str, tables: &[(String, Table)]) -> Result<String> {
    let mut lines: Vec<(&str, Vec<(f64, f64)>, usize)> = Vec::new();
    for (label, t) in tables {
        let xs = t.column("step")?;
        let ys = smooth(t.column(column)?);
        let window = 2 * smoothing_half_width(ys.len()) + 1;
        lines.push((label, xs.iter().copied().zip(ys).collect(), window));
    }
    let all = || lines.iter().flat_map(|l| l.1.iter());
    let frame = Frame {
        x_range: padded(all().map(|p| p.0).fold(f64::INFINITY, f64::min), all().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max)),
        y_range: padded(all().map(|p| p.1).fold(f64::INFINITY, f64::min), all().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max)),
    };

    let mut s = String::new();
    let w = &mut s;
    let _ = writeln!(
        w,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(w, r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(w, r#"<text x="{PLOT_LEFT}" y="20" font-size="15">{}</text>"#, escape(column));
    let windows: Vec<String> = lines.iter().map(|l| l.2.to_string()).collect();
    let _ = writeln!(
        w,
        r##"<text x="{PLOT_LEFT}" y="38" font-size="11" fill="#555">smoothing: centered moving average over 5% of steps (window {} points)</text>"##,
        if windows.is_empty() { "-".to_string() } else { windows.join("/") }
    );
    let _ = writeln!(
        w,
        r##"<path d="M{PLOT_LEFT} {PLOT_TOP} V{PLOT_BOTTOM} H{PLOT_RIGHT}" fill="none" stroke="#000"/>"##
    );
    for i in 0..=TICKS {
        let f = i as f64 / TICKS as f64;
        let xv = frame.x_range.0 + f * (frame.x_range.1 - frame.x_range.0);
        let yv = frame.y_range.0 + f * (frame.y_range.1 - frame.y_range.0);
        let (px, py) = (frame.x(xv), frame.y(yv));
        let _ = writeln!(
            w,
            r##"<line x1="{px:.3}" y1="{PLOT_BOTTOM}" x2="{px:.3}" y2="{:.3}" stroke="#000"/><text x="{px:.3}" y="{:.3}" text-anchor="middle">{}</text>"##,
            PLOT_BOTTOM + 5.0,
            PLOT_BOTTOM + 18.0,
            tick(xv)
        );
        let _ = writeln!(
            w,
            r##"<line x1="{:.3}" y1="{py:.3}" x2="{PLOT_LEFT}" y2="{py:.3}" stroke="#000"/><text x="{:.3}" y="{:.3}" text-anchor="end">{}</text>"##,
            PLOT_LEFT - 5.0,
            PLOT_LEFT - 8.0,
            py + 4.0,
            tick(yv)
        );
    }
    let _ = writeln!(
        w,
        r#"<text x="{:.3}" y="{:.3}" text-anchor="middle">step</text>"#,
        (PLOT_LEFT + PLOT_RIGHT) / 2.0,
        HEIGHT - 12.0
    );
    for (i, (label, pts, _)) in lines.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if !pts.is_empty() {
            let coords: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.3},{:.3}", frame.x(x), frame.y(y))).collect();
            let _ = writeln!(
                w,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                coords.join(" ")
            );
        }
        let ly = PLOT_TOP + 16.0 * i as f64;
        let _ = writeln!(
            w,
            r#"<line x1="{:.3}" y1="{ly:.3}" x2="{:.3}" y2="{ly:.3}" stroke="{color}" stroke-width="2"/><text x="{:.3}" y="{:.3}">{}</text>"#,
            PLOT_RIGHT + 12.0,
            PLOT_RIGHT + 32.0,
            PLOT_RIGHT + 38.0,
            ly + 4.0,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-3) {
        format!("{v:.2e}")
    } else {
        format!("{v:.4}")
    }
}

/// Final-window means of every series, one block per table.
pub fn render_summary(tables: &[(String, Table)]) -> String {
    let mut s = String::new();
    for (label, t) in tables {
        let _ = writeln!(s, "{label}");
        if t.rows == 0 {
            s.push_str("  no steps\n");
            continue;
        }
        let _ = writeln!(s, "  steps: {}", t.rows);
        for c in series() {
            let v = t.column(c).ok().and_then(|v| final_window_mean(v, SUMMARY_WINDOW));
            if let Some(v) = v {
                let _ = writeln!(s, "  {c} (final {:.0}% mean): {v:.6e}", SUMMARY_WINDOW * 100.0);
            }
        }
    }
    s
}

/// Legend labels: each path relative to the deepest directory shared by all
/// inputs, so reports do not depend on where the run directory lives.
pub fn labels(paths: &[PathBuf]) -> Vec<String> {
    let parts: Vec<Vec<String>> = paths
        .iter()
        .map(|p| p.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect())
        .collect();
    let shortest = parts.iter().map(|p| p.len().saturating_sub(1)).min().unwrap_or(0);
    let shared = (0..shortest)
        .take_while(|&i| parts.iter().all(|p| p[i] == parts[0][i]))
        .count();
    parts.iter().map(|p| p[shared..].join("/")).collect()
}

/// Reads telemetry CSVs and writes `<series>.svg` for every series plus
/// `summary.txt` into `out`. Lines are labelled by [`labels`].
pub fn emit_report(csvs: &[PathBuf], out: &Path, overwrite: bool) -> Result<Vec<PathBuf>> {
    let mut tables = Vec::with_capacity(csvs.len());
    for (p, label) in csvs.iter().zip(labels(csvs)) {
        let t = Table::read(p)?;
        t.require(&COLUMNS)?;
        tables.push((label, t));
    }
    let mut targets: Vec<(PathBuf, String)> = series()
        .map(|c| Ok((out.join(format!("{c}.svg")), render_svg(c, &tables)?)))
        .collect::<Result<_>>()?;
    targets.push((out.join("summary.txt"), render_summary(&tables)));
    if !overwrite {
        if let Some((p, _)) = targets.iter().find(|(p, _)| p.exists()) {
            return Err(LabError::OutputExists(p.clone()));
        }
    }
    std::fs::create_dir_all(out).map_err(|e| LabError::io(out, e))?;
    for (p, text) in &targets {
        std::fs::write(p, text).map_err(|e| LabError::io(p, e))?;
    }
    Ok(targets.into_iter().map(|(p, _)| p).collect())
}
