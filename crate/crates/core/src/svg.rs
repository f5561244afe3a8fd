//! Minimal deterministic SVG charts.

use std::fmt::Write as _;

const W: f64 = 640.0;
const H: f64 = 360.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<Option<f64>>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Frame {
    lo: f64,
    hi: f64,
}

impl Frame {
    fn new(values: impl Iterator<Item = f64>, fixed: Option<(f64, f64)>) -> Self {
        if let Some((lo, hi)) = fixed {
            return Frame { lo, hi };
        }
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            return Frame { lo: 0.0, hi: 1.0 };
        }
        if hi - lo < 1e-9 {
            lo -= 1.0;
            hi += 1.0;
        }
        let pad = 0.08 * (hi - lo);
        Frame { lo: lo - pad, hi: hi + pad }
    }

    fn y(&self, v: f64) -> f64 {
        TOP + (H - TOP - BOTTOM) * (1.0 - (v - self.lo) / (self.hi - self.lo))
    }
}

fn open(out: &mut String, title: &str, frame: &Frame, y_label: &str) {
    writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#).unwrap();
    writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    writeln!(out, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title)).unwrap();
    let (x0, x1) = (LEFT, W - RIGHT);
    for i in 0..=4 {
        let v = frame.lo + (frame.hi - frame.lo) * i as f64 / 4.0;
        let y = frame.y(v);
        writeln!(out, r##"<line x1="{x0}" y1="{y:.2}" x2="{x1}" y2="{y:.2}" stroke="#ddd"/>"##).unwrap();
        writeln!(out, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{v:.2}</text>"#, x0 - 6.0, y + 4.0).unwrap();
    }
    writeln!(out, r#"<line x1="{x0}" y1="{TOP}" x2="{x0}" y2="{}" stroke="black"/>"#, H - BOTTOM).unwrap();
    writeln!(out, r#"<line x1="{x0}" y1="{0}" x2="{x1}" y2="{0}" stroke="black"/>"#, H - BOTTOM).unwrap();
    writeln!(
        out,
        r#"<text x="14" y="{:.2}" transform="rotate(-90 14 {:.2})" text-anchor="middle">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    )
    .unwrap();
}

fn legend(out: &mut String, row: usize, name: &str, color: &str, dashed: bool) {
    let x = W - RIGHT + 12.0;
    let y = TOP + 16.0 * row as f64;
    let dash = if dashed { r#" stroke-dasharray="5,3""# } else { "" };
    writeln!(out, r#"<line x1="{x}" y1="{y}" x2="{}" y2="{y}" stroke="{color}" stroke-width="2"{dash}/>"#, x + 18.0).unwrap();
    writeln!(out, r#"<text x="{}" y="{}">{}</text>"#, x + 24.0, y + 4.0, escape(name)).unwrap();
}

fn x_at(i: usize, n: usize) -> f64 {
    let span = W - RIGHT - LEFT;
    LEFT + span * (i as f64 + 0.5) / n.max(1) as f64
}

fn x_labels(out: &mut String, labels: &[String]) {
    for (i, l) in labels.iter().enumerate() {
        writeln!(out, r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#, x_at(i, labels.len()), H - BOTTOM + 16.0, escape(l)).unwrap();
    }
}

/// Line chart over categorical x positions, with an optional dashed
/// reference line.
pub fn line_chart(
    title: &str,
    y_label: &str,
    labels: &[String],
    series: &[Series],
    reference: Option<(&str, f64)>,
    y_range: Option<(f64, f64)>,
) -> String {
    let values = series.iter().flat_map(|s| s.points.iter().flatten().copied()).chain(reference.map(|r| r.1));
    let frame = Frame::new(values, y_range);
    let mut out = String::new();
    open(&mut out, title, &frame, y_label);
    x_labels(&mut out, labels);
    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.map(|v| format!("{:.2},{:.2}", x_at(i, labels.len()), frame.y(v))))
            .collect();
        writeln!(out, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, pts.join(" ")).unwrap();
        for p in &pts {
            let (x, y) = p.split_once(',').unwrap();
            writeln!(out, r#"<circle cx="{x}" cy="{y}" r="3" fill="{color}"/>"#).unwrap();
        }
        legend(&mut out, k, &s.name, color, false);
    }
    if let Some((name, v)) = reference {
        let y = frame.y(v);
        writeln!(out, r##"<line x1="{LEFT}" y1="{y:.2}" x2="{}" y2="{y:.2}" stroke="#555" stroke-width="2" stroke-dasharray="5,3"/>"##, W - RIGHT).unwrap();
        legend(&mut out, series.len(), name, "#555", true);
    }
    out.push_str("</svg>\n");
    out
}

/// Grouped bar chart: one group per label, one bar per series.
pub fn bar_chart(title: &str, y_label: &str, labels: &[String], series: &[Series]) -> String {
    let values = series.iter().flat_map(|s| s.points.iter().flatten().copied()).chain(std::iter::once(0.0));
    let frame = Frame::new(values, None);
    let mut out = String::new();
    open(&mut out, title, &frame, y_label);
    x_labels(&mut out, labels);
    let slot = (W - RIGHT - LEFT) / labels.len().max(1) as f64;
    let bar = 0.8 * slot / series.len().max(1) as f64;
    let zero = frame.y(0.0);
    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        for (i, p) in s.points.iter().enumerate() {
            let Some(v) = p else { continue };
            let x = LEFT + slot * i as f64 + 0.1 * slot + bar * k as f64;
            let y = frame.y(*v);
            let (top, h) = if y < zero { (y, zero - y) } else { (zero, y - zero) };
            writeln!(out, r#"<rect x="{x:.2}" y="{top:.2}" width="{bar:.2}" height="{h:.2}" fill="{color}"/>"#).unwrap();
        }
        legend(&mut out, k, &s.name, color, false);
    }
    out.push_str("</svg>\n");
    out
}
