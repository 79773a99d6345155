//! Self-contained SVG charts: line charts with a trailing moving-average
//! overlay, bar charts, and decision regions of 2-D classifiers.

use std::fmt::Write;

use fedcvar_core::data::Dataset;
use fedcvar_core::numerics::{self, ModelParams, NumericsError};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 52.0;

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

pub fn color(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// Mean of the last `min(window, i + 1)` values at every position `i`.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (i, v) in values.iter().enumerate() {
        sum += v;
        if i >= window {
            sum -= values[i - window];
        }
        let n = (i + 1).min(window);
        // Recompute short windows exactly so window 1 reproduces the input.
        out.push(if n == 1 { *v } else { sum / n as f64 });
    }
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

fn tick_label(v: f64) -> String {
    if v == 0.0 || (v.abs() >= 0.01 && v.abs() < 1e5) {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        format!("{v:.2e}")
    }
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x.0) / (self.x.1 - self.x.0) * (WIDTH - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - BOTTOM - (y - self.y.0) / (self.y.1 - self.y.0) * (HEIGHT - TOP - BOTTOM)
    }
}

fn open_svg(out: &mut String, title: &str) {
    let _ = write!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = write!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = write!(
        out,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        (WIDTH - RIGHT + LEFT) / 2.0,
        escape(title)
    );
}

fn axes(out: &mut String, f: &Frame, x_label: &str, y_label: &str) {
    let (x0, x1) = (LEFT, WIDTH - RIGHT);
    let (y0, y1) = (HEIGHT - BOTTOM, TOP);
    let _ = write!(out, r##"<path d="M{x0},{y1} L{x0},{y0} L{x1},{y0}" fill="none" stroke="#333"/>"##);
    for i in 0..=4 {
        let fx = f.x.0 + (f.x.1 - f.x.0) * i as f64 / 4.0;
        let fy = f.y.0 + (f.y.1 - f.y.0) * i as f64 / 4.0;
        let (px, py) = (f.px(fx), f.py(fy));
        let _ = write!(
            out,
            r##"<line x1="{px:.1}" y1="{y0}" x2="{px:.1}" y2="{:.1}" stroke="#333"/><text x="{px:.1}" y="{:.1}" text-anchor="middle">{}</text>"##,
            y0 + 5.0,
            y0 + 18.0,
            tick_label(fx)
        );
        let _ = write!(
            out,
            r##"<line x1="{:.1}" y1="{py:.1}" x2="{x0}" y2="{py:.1}" stroke="#333"/><line x1="{x0}" y1="{py:.1}" x2="{x1}" y2="{py:.1}" stroke="#eee"/><text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"##,
            x0 - 5.0,
            x0 - 8.0,
            py + 4.0,
            tick_label(fy)
        );
    }
    let _ = write!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        (x0 + x1) / 2.0,
        HEIGHT - 12.0,
        escape(x_label)
    );
    let _ = write!(
        out,
        r#"<text transform="translate(16,{:.1}) rotate(-90)" text-anchor="middle">{}</text>"#,
        (y0 + y1) / 2.0,
        escape(y_label)
    );
}

fn polyline(out: &mut String, f: &Frame, xs: &[f64], ys: &[f64], stroke: &str, width: f64, opacity: f64) {
    let pts: Vec<String> = xs.iter().zip(ys).map(|(&x, &y)| format!("{:.2},{:.2}", f.px(x), f.py(y))).collect();
    let _ = write!(
        out,
        r#"<polyline points="{}" fill="none" stroke="{stroke}" stroke-width="{width}" stroke-opacity="{opacity}"/>"#,
        pts.join(" ")
    );
}

/// Raw curves (faint) with their trailing moving averages (solid). A
/// series with a single point is drawn as a marker.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series], window: usize) -> String {
    let frame = Frame {
        x: range(series.iter().flat_map(|s| s.points.iter().map(|p| p.0))),
        y: range(series.iter().flat_map(|s| s.points.iter().map(|p| p.1))),
    };
    let mut out = String::new();
    open_svg(&mut out, title);
    axes(&mut out, &frame, x_label, y_label);
    for (i, s) in series.iter().enumerate() {
        let c = color(i);
        let xs: Vec<f64> = s.points.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = s.points.iter().map(|p| p.1).collect();
        match xs.len() {
            0 => {}
            1 => {
                let _ = write!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="4" fill="{c}"/>"#, frame.px(xs[0]), frame.py(ys[0]));
            }
            _ => {
                polyline(&mut out, &frame, &xs, &ys, c, 1.0, 0.35);
                polyline(&mut out, &frame, &xs, &moving_average(&ys, window), c, 2.0, 1.0);
            }
        }
        let ly = TOP + 10.0 + 18.0 * i as f64;
        let lx = WIDTH - RIGHT + 14.0;
        let _ = write!(
            out,
            r#"<rect x="{lx}" y="{:.1}" width="12" height="12" fill="{c}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            ly - 10.0,
            lx + 18.0,
            ly,
            escape(&s.name)
        );
    }
    if window > 1 {
        let _ = write!(
            out,
            r##"<text x="{:.1}" y="{:.1}" fill="#555">solid: moving average ({window})</text>"##,
            WIDTH - RIGHT + 14.0,
            HEIGHT - BOTTOM
        );
    }
    out.push_str("</svg>\n");
    out
}

pub fn bar_chart(title: &str, x_label: &str, y_label: &str, values: &[f64]) -> String {
    let hi = values.iter().cloned().fold(0.0, f64::max);
    let frame = Frame { x: (-0.5, values.len().max(1) as f64 - 0.5), y: (0.0, if hi > 0.0 { hi * 1.05 } else { 1.0 }) };
    let mut out = String::new();
    open_svg(&mut out, title);
    axes(&mut out, &frame, x_label, y_label);
    let slot = (WIDTH - LEFT - RIGHT) / values.len().max(1) as f64;
    for (i, &v) in values.iter().enumerate() {
        let (x, y) = (frame.px(i as f64) - 0.4 * slot, frame.py(v));
        let _ = write!(
            out,
            r#"<rect x="{x:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="{}"><title>user {i}: {v}</title></rect>"#,
            0.8 * slot,
            HEIGHT - BOTTOM - y,
            color(0)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Argmax regions of `params` on a `grid × grid` raster over the bounding
/// box of `points`, with the points drawn on top, coloured by label.
pub fn decision_regions(title: &str, params: &ModelParams, points: &Dataset, grid: usize) -> Result<String, NumericsError> {
    assert_eq!(points.dim(), 2, "decision regions need 2-D inputs");
    let grid = grid.max(2);
    let xs: Vec<f64> = (0..points.len()).map(|i| points.row(i)[0]).collect();
    let ys: Vec<f64> = (0..points.len()).map(|i| points.row(i)[1]).collect();
    let frame = Frame { x: range(xs.iter().cloned()), y: range(ys.iter().cloned()) };
    let cell_x = (frame.x.1 - frame.x.0) / grid as f64;
    let cell_y = (frame.y.1 - frame.y.0) / grid as f64;
    let mut centres = Vec::with_capacity(grid * grid * 2);
    for r in 0..grid {
        let y = frame.y.1 - (r as f64 + 0.5) * cell_y;
        for c in 0..grid {
            centres.push(frame.x.0 + (c as f64 + 0.5) * cell_x);
            centres.push(y);
        }
    }
    let labels = numerics::predict(params, &centres, 2)?;

    let mut out = String::new();
    open_svg(&mut out, title);
    let pw = (WIDTH - LEFT - RIGHT) / grid as f64;
    let ph = (HEIGHT - TOP - BOTTOM) / grid as f64;
    for r in 0..grid {
        let row = &labels[r * grid..(r + 1) * grid];
        let mut start = 0;
        while start < grid {
            let mut end = start + 1;
            while end < grid && row[end] == row[start] {
                end += 1;
            }
            let _ = write!(
                out,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}" fill-opacity="0.25"/>"#,
                LEFT + start as f64 * pw,
                TOP + r as f64 * ph,
                (end - start) as f64 * pw + 0.05,
                ph + 0.05,
                color(row[start])
            );
            start = end;
        }
    }
    axes(&mut out, &frame, "x1", "x2");
    for i in 0..points.len() {
        let _ = write!(
            out,
            r##"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{}" stroke="#222" stroke-width="0.4"/>"##,
            frame.px(xs[i]),
            frame.py(ys[i]),
            color(points.labels()[i])
        );
    }
    for k in 0..points.num_classes() {
        let ly = TOP + 10.0 + 18.0 * k as f64;
        let lx = WIDTH - RIGHT + 14.0;
        let _ = write!(
            out,
            r#"<rect x="{lx}" y="{:.1}" width="12" height="12" fill="{}"/><text x="{:.1}" y="{ly:.1}">class {k}</text>"#,
            ly - 10.0,
            color(k),
            lx + 18.0
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}
