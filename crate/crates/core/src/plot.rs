//! Minimal self-contained SVG line plots.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::simcore::{error_series, SimLog};

const W: f64 = 720.0;
const H: f64 = 440.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 130.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 55.0;

const PALETTE: [&str; 8] = [
    "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf", "#7f7f7f",
];
const LEADER_COLOR: &str = "#1f77b4";

pub struct Series<'a> {
    pub label: String,
    pub color: &'a str,
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Copy)]
struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        MARGIN_L + (x - self.x0) / (self.x1 - self.x0) * (W - MARGIN_L - MARGIN_R)
    }
    fn py(&self, y: f64) -> f64 {
        H - MARGIN_B - (y - self.y0) / (self.y1 - self.y0) * (H - MARGIN_T - MARGIN_B)
    }
}

fn bounds<'a>(it: impl Iterator<Item = &'a (f64, f64)>) -> Option<Frame> {
    let mut f = Frame {
        x0: f64::INFINITY,
        x1: f64::NEG_INFINITY,
        y0: f64::INFINITY,
        y1: f64::NEG_INFINITY,
    };
    for &(x, y) in it.filter(|(x, y)| x.is_finite() && y.is_finite()) {
        f.x0 = f.x0.min(x);
        f.x1 = f.x1.max(x);
        f.y0 = f.y0.min(y);
        f.y1 = f.y1.max(y);
    }
    if !f.x0.is_finite() {
        return None;
    }
    let pad = |lo: &mut f64, hi: &mut f64| {
        if *hi - *lo < 1e-12 {
            *lo -= 0.5;
            *hi += 0.5;
        }
    };
    pad(&mut f.x0, &mut f.x1);
    pad(&mut f.y0, &mut f.y1);
    Some(f)
}

/// Roughly six "nice" tick positions covering `[lo, hi]`.
fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let raw = (hi - lo) / 6.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + 1e-9 * step {
        out.push(if t.abs() < 1e-12 * step { 0.0 } else { t });
        t += step;
    }
    out
}

fn fmt_tick(v: f64) -> String {
    let s = format!("{v:.3}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Renders line series on shared axes. `equal_aspect` keeps x and y scales
/// identical, which suits plan views.
pub fn render(title: &str, xlabel: &str, ylabel: &str, series: &[Series<'_>], equal_aspect: bool) -> String {
    let mut frame = bounds(series.iter().flat_map(|s| s.points.iter())).unwrap_or(Frame {
        x0: 0.0,
        x1: 1.0,
        y0: 0.0,
        y1: 1.0,
    });
    if equal_aspect {
        let pw = W - MARGIN_L - MARGIN_R;
        let ph = H - MARGIN_T - MARGIN_B;
        let scale = ((frame.x1 - frame.x0) / pw).max((frame.y1 - frame.y0) / ph);
        let (cx, cy) = ((frame.x0 + frame.x1) / 2.0, (frame.y0 + frame.y1) / 2.0);
        frame = Frame {
            x0: cx - scale * pw / 2.0,
            x1: cx + scale * pw / 2.0,
            y0: cy - scale * ph / 2.0,
            y1: cy + scale * ph / 2.0,
        };
    }

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        (MARGIN_L + W - MARGIN_R) / 2.0,
        escape(title)
    );
    let (left, right) = (MARGIN_L, W - MARGIN_R);
    let (top, bottom) = (MARGIN_T, H - MARGIN_B);
    for t in ticks(frame.x0, frame.x1) {
        let x = frame.px(t);
        let _ = writeln!(s, r##"<line x1="{x:.2}" y1="{top}" x2="{x:.2}" y2="{bottom}" stroke="#e5e5e5"/>"##);
        let _ = writeln!(
            s,
            r#"<text x="{x:.2}" y="{}" text-anchor="middle">{}</text>"#,
            bottom + 16.0,
            fmt_tick(t)
        );
    }
    for t in ticks(frame.y0, frame.y1) {
        let y = frame.py(t);
        let _ = writeln!(s, r##"<line x1="{left}" y1="{y:.2}" x2="{right}" y2="{y:.2}" stroke="#e5e5e5"/>"##);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.2}" text-anchor="end">{}</text>"#,
            left - 6.0,
            y + 4.0,
            fmt_tick(t)
        );
    }
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        right - left,
        bottom - top
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (left + right) / 2.0,
        H - 14.0,
        escape(xlabel)
    );
    let _ = writeln!(
        s,
        r#"<text transform="translate(18 {}) rotate(-90)" text-anchor="middle">{}</text>"#,
        (top + bottom) / 2.0,
        escape(ylabel)
    );

    for (k, ser) in series.iter().enumerate() {
        let pts: Vec<String> = ser
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", frame.px(x), frame.py(y)))
            .collect();
        if !pts.is_empty() {
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{}" stroke-width="1.6" points="{}"/>"#,
                ser.color,
                pts.join(" ")
            );
        }
        let ly = top + 14.0 + 18.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{}" stroke-width="2"/>"#,
            right + 10.0,
            right + 30.0,
            ser.color
        );
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, right + 36.0, ly + 4.0, escape(&ser.label));
    }
    s.push_str("</svg>\n");
    s
}

/// Per-agent `|e1| + |e1'|` against time.
pub fn error_plot(log: &SimLog) -> String {
    let series: Vec<Series> = error_series(log)
        .into_iter()
        .enumerate()
        .map(|(k, e)| Series {
            label: format!("agent {}", k + 1),
            color: PALETTE[k % PALETTE.len()],
            points: log.times.iter().copied().zip(e).collect(),
        })
        .collect();
    render(
        &format!("Error signals ({})", log.mode),
        "t [s]",
        "|e1| + |de1/dt|",
        &series,
        false,
    )
}

/// Top-down view of the first two position coordinates; leader in blue.
pub fn plan_plot(log: &SimLog) -> String {
    let xy = |p: &Vec<f64>| (p[0], p.get(1).copied().unwrap_or(0.0));
    let mut series = vec![Series {
        label: "leader".into(),
        color: LEADER_COLOR,
        points: log.leader_x1.iter().map(xy).collect(),
    }];
    series.extend(log.agents.iter().enumerate().map(|(k, a)| Series {
        label: format!("agent {}", k + 1),
        color: PALETTE[k % PALETTE.len()],
        points: a.x1.iter().map(xy).collect(),
    }));
    render(&format!("Trajectories ({})", log.mode), "x1", "x2", &series, true)
}

pub fn write_svg(svg: &str, path: &Path) -> std::io::Result<()> {
    fs::write(path, svg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ticks_cover_range() {
        let t = ticks(0.0, 55.0);
        assert_eq!(t.first(), Some(&0.0));
        assert!(t.len() >= 4 && t.len() <= 8);
        assert!(t.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn render_is_wellformed() {
        let svg = render(
            "a < b",
            "x",
            "y",
            &[Series {
                label: "s".into(),
                color: "red",
                points: vec![(0.0, 1.0), (1.0, f64::NAN), (2.0, 3.0)],
            }],
            true,
        );
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("a &lt; b"));
        assert!(!svg.contains("NaN"));
        assert_eq!(svg.matches("<polyline").count(), 1);
    }

    #[test]
    fn degenerate_series_does_not_divide_by_zero() {
        let svg = render(
            "flat",
            "x",
            "y",
            &[Series {
                label: "c".into(),
                color: "red",
                points: vec![(1.0, 1.0), (1.0, 1.0)],
            }],
            false,
        );
        assert!(!svg.contains("NaN") && !svg.contains("inf"));
    }
}
