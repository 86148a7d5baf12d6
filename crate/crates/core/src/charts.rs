//! Static SVG line charts for training curves and probe results.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write;

use crate::eval::{MetricsRow, ProbeResult, Split, INSTANCE_KS};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 420.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 140.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 52.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LineChart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    /// Fixed y range; derived from the data when `None`.
    pub y_range: Option<(f64, f64)>,
    pub series: Vec<Series>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Round-number tick positions covering `[lo, hi]`.
fn ticks(lo: f64, hi: f64, target: usize) -> Vec<f64> {
    let span = (hi - lo).max(f64::EPSILON);
    let raw = span / target as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * mag);
    let first = (lo / step).ceil() as i64;
    let last = (hi / step).floor() as i64;
    (first..=last).map(|i| i as f64 * step).collect()
}

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 1000.0 && v.fract() == 0.0 {
        format!("{}", v as i64)
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

impl LineChart {
    fn bounds(&self) -> ((f64, f64), (f64, f64)) {
        let pts = self.series.iter().flat_map(|s| &s.points);
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y) in pts {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if !x0.is_finite() {
            (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
        }
        if x1 <= x0 {
            x1 = x0 + 1.0;
        }
        if y1 <= y0 {
            y1 = y0 + 1.0;
        }
        ((x0, x1), self.y_range.unwrap_or((y0, y1)))
    }

    pub fn to_svg(&self) -> String {
        let ((x0, x1), (y0, y1)) = self.bounds();
        let pw = WIDTH - MARGIN_L - MARGIN_R;
        let ph = HEIGHT - MARGIN_T - MARGIN_B;
        let sx = |x: f64| MARGIN_L + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| MARGIN_T + (1.0 - (y - y0) / (y1 - y0)) * ph;

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
            MARGIN_L + pw / 2.0,
            escape(&self.title)
        );

        for t in ticks(y0, y1, 5) {
            let y = sy(t);
            let _ = writeln!(
                s,
                r##"<line x1="{MARGIN_L}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#e5e5e5"/><text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"##,
                MARGIN_L + pw,
                MARGIN_L - 6.0,
                y + 4.0,
                fmt_tick(t)
            );
        }
        for t in ticks(x0, x1, 6) {
            let x = sx(t);
            let _ = writeln!(
                s,
                r##"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="#999"/><text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"##,
                MARGIN_T + ph,
                MARGIN_T + ph + 5.0,
                MARGIN_T + ph + 18.0,
                fmt_tick(t)
            );
        }
        let _ = writeln!(
            s,
            r##"<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>"##
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            MARGIN_L + pw / 2.0,
            HEIGHT - 12.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text transform="translate(16 {:.1}) rotate(-90)" text-anchor="middle">{}</text>"#,
            MARGIN_T + ph / 2.0,
            escape(&self.y_label)
        );

        for (i, series) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            if !series.points.is_empty() {
                let mut path = String::new();
                for (j, &(x, y)) in series.points.iter().enumerate() {
                    let _ = write!(path, "{}{:.2},{:.2} ", if j == 0 { "M" } else { "L" }, sx(x), sy(y));
                }
                let _ = writeln!(
                    s,
                    r#"<path d="{}" fill="none" stroke="{color}" stroke-width="1.6"/>"#,
                    path.trim_end()
                );
            }
            let ly = MARGIN_T + 14.0 + 18.0 * i as f64;
            let lx = MARGIN_L + pw + 12.0;
            let _ = writeln!(
                s,
                r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
                lx + 20.0,
                lx + 26.0,
                ly + 4.0,
                escape(&series.name)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

/// Trailing mean over the last `window` batches, skipping absent values.
pub fn trailing_mean(points: &[(usize, Option<f64>)], window: usize) -> Vec<(f64, f64)> {
    let window = window.max(1);
    let mut buf: VecDeque<(usize, f64)> = VecDeque::new();
    let mut sum = 0.0;
    let mut out = Vec::with_capacity(points.len());
    for &(batch, v) in points {
        if let Some(v) = v {
            buf.push_back((batch, v));
            sum += v;
        }
        while let Some(&(b, old)) = buf.front() {
            if b + window <= batch {
                sum -= old;
                buf.pop_front();
            } else {
                break;
            }
        }
        if !buf.is_empty() {
            out.push((batch as f64, sum / buf.len() as f64));
        }
    }
    out
}

/// Per-instance accuracy and request-rate charts over training batches.
pub fn instance_charts(rows: &[MetricsRow], window: usize) -> (LineChart, LineChart) {
    let mut by_k: BTreeMap<usize, Vec<(usize, Option<f64>, Option<f64>)>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.split == Split::Train && INSTANCE_KS.contains(&r.k)) {
        by_k.entry(r.k).or_default().push((r.batch, r.accuracy, r.request_rate));
    }
    let make = |title: &str, y_label: &str, pick: fn(&(usize, Option<f64>, Option<f64>)) -> Option<f64>| LineChart {
        title: title.into(),
        x_label: "training batch".into(),
        y_label: y_label.into(),
        y_range: Some((0.0, 1.0)),
        series: by_k
            .iter()
            .map(|(k, pts)| Series {
                name: ordinal(*k),
                points: trailing_mean(&pts.iter().map(|p| (p.0, pick(p))).collect::<Vec<_>>(), window),
            })
            .collect(),
    };
    (
        make("Accuracy by instance", "accuracy", |p| p.1),
        make("Label requests by instance", "request rate", |p| p.2),
    )
}

fn ordinal(k: usize) -> String {
    let suffix = match (k % 10, k % 100) {
        (1, n) if n != 11 => "st",
        (2, n) if n != 12 => "nd",
        (3, n) if n != 13 => "rd",
        _ => "th",
    };
    format!("{k}{suffix} instance")
}

/// Request percentage by time step, one series per probe.
pub fn probe_chart(probes: &[ProbeResult]) -> LineChart {
    LineChart {
        title: "Label requests around a class switch".into(),
        x_label: "time step".into(),
        y_label: "% episodes requesting".into(),
        y_range: Some((0.0, 100.0)),
        series: probes
            .iter()
            .map(|p| Series {
                name: format!("switch after {}", p.prefix_len),
                points: p
                    .request_pct
                    .iter()
                    .enumerate()
                    .map(|(t, v)| ((t + 1) as f64, *v))
                    .collect(),
            })
            .collect(),
    }
}
