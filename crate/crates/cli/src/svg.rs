//! Minimal SVG plots. Coordinates are printed with fixed precision so the
//! same data always yields the same bytes.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 55.0;

pub const BLUE: &str = "#1f77b4";
pub const ORANGE: &str = "#ff7f0e";
pub const GREEN: &str = "#2ca02c";
pub const GREY: &str = "#7f7f7f";

pub enum Series {
    Line { points: Vec<(f64, f64)>, color: &'static str, label: String },
    Markers { points: Vec<(f64, f64)>, color: &'static str, label: String },
    /// Markers with symmetric vertical error bars.
    ErrorBars { points: Vec<(f64, f64, f64)>, color: &'static str, label: String },
    /// Vertical sticks from zero.
    Sticks { points: Vec<(f64, f64)>, color: &'static str, label: String },
}

impl Series {
    fn label(&self) -> (&str, &'static str) {
        match self {
            Series::Line { label, color, .. }
            | Series::Markers { label, color, .. }
            | Series::ErrorBars { label, color, .. }
            | Series::Sticks { label, color, .. } => (label, color),
        }
    }

    fn extent(&self) -> Vec<(f64, f64)> {
        match self {
            Series::Line { points, .. } | Series::Markers { points, .. } => points.clone(),
            Series::Sticks { points, .. } => points.iter().flat_map(|&(x, y)| [(x, 0.0), (x, y)]).collect(),
            Series::ErrorBars { points, .. } => points.iter().flat_map(|&(x, y, e)| [(x, y - e), (x, y + e)]).collect(),
        }
    }
}

pub struct Plot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn f(v: f64) -> String {
    format!("{v:.2}")
}

/// Round tick spacing covering `span` with roughly `n` intervals.
fn tick_step(span: f64, n: f64) -> f64 {
    let raw = span / n;
    let mag = 10f64.powf(raw.log10().floor());
    let r = raw / mag;
    let m = if r < 1.5 {
        1.0
    } else if r < 3.0 {
        2.0
    } else if r < 7.0 {
        5.0
    } else {
        10.0
    };
    m * mag
}

fn tick_label(v: f64, step: f64) -> String {
    let decimals = if step >= 1.0 { 0 } else { (-step.log10().floor()) as usize };
    let s = format!("{v:.decimals$}");
    if s.trim_start_matches('-').chars().all(|c| c == '0' || c == '.') {
        "0".into()
    } else {
        s
    }
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo <= 1e-12 * lo.abs().max(1.0) {
        let pad = 0.5 * lo.abs().max(1.0);
        return (lo - pad, hi + pad);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn header(out: &mut String, w: f64, h: f64) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
    left: f64,
    top: f64,
    width: f64,
    height: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        self.left + (x - self.x0) / (self.x1 - self.x0) * self.width
    }

    fn py(&self, y: f64) -> f64 {
        self.top + self.height - (y - self.y0) / (self.y1 - self.y0) * self.height
    }

    fn axes(&self, out: &mut String, title: &str, x_label: &str, y_label: &str) {
        let (l, t, w, h) = (self.left, self.top, self.width, self.height);
        let _ = writeln!(out, r#"<rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="black"/>"#, f(l), f(t), f(w), f(h));
        let xs = tick_step(self.x1 - self.x0, 6.0);
        let mut k = (self.x0 / xs).ceil();
        while k * xs <= self.x1 + 1e-9 * xs {
            let v = k * xs;
            let x = self.px(v);
            let _ = writeln!(out, r#"<line x1="{0}" y1="{1}" x2="{0}" y2="{2}" stroke="black"/>"#, f(x), f(t + h), f(t + h + 5.0));
            let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, f(x), f(t + h + 18.0), tick_label(v, xs));
            k += 1.0;
        }
        let ys = tick_step(self.y1 - self.y0, 5.0);
        let mut k = (self.y0 / ys).ceil();
        while k * ys <= self.y1 + 1e-9 * ys {
            let v = k * ys;
            let y = self.py(v);
            let _ = writeln!(out, r#"<line x1="{0}" y1="{1}" x2="{2}" y2="{1}" stroke="black"/>"#, f(l - 5.0), f(y), f(l));
            let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, f(l - 8.0), f(y + 4.0), tick_label(v, ys));
            k += 1.0;
        }
        let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle" font-size="14">{}</text>"#, f(l + w / 2.0), f(t - 15.0), esc(title));
        let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, f(l + w / 2.0), f(t + h + 40.0), esc(x_label));
        let (yx, yy) = (l - 52.0, t + h / 2.0);
        let _ = writeln!(
            out,
            r#"<text x="{0}" y="{1}" text-anchor="middle" transform="rotate(-90 {0} {1})">{2}</text>"#,
            f(yx),
            f(yy),
            esc(y_label)
        );
    }
}

impl Plot {
    pub fn new(title: impl Into<String>, x_label: impl Into<String>, y_label: impl Into<String>) -> Self {
        Self {
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            series: Vec::new(),
        }
    }

    pub fn with(mut self, s: Series) -> Self {
        self.series.push(s);
        self
    }

    pub fn render(&self) -> String {
        let pts: Vec<(f64, f64)> = self.series.iter().flat_map(|s| s.extent()).collect();
        let (x0, x1) = range(pts.iter().map(|p| p.0));
        let (y0, y1) = range(pts.iter().map(|p| p.1));
        let fr = Frame {
            x0,
            x1,
            y0,
            y1,
            left: LEFT,
            top: TOP,
            width: WIDTH - LEFT - RIGHT,
            height: HEIGHT - TOP - BOTTOM,
        };
        let mut out = String::new();
        header(&mut out, WIDTH, HEIGHT);
        fr.axes(&mut out, &self.title, &self.x_label, &self.y_label);
        for s in &self.series {
            match s {
                Series::Line { points, color, .. } => {
                    let path: Vec<String> = points
                        .iter()
                        .filter(|p| p.0.is_finite() && p.1.is_finite())
                        .map(|&(x, y)| format!("{},{}", f(fr.px(x)), f(fr.py(y))))
                        .collect();
                    let _ = writeln!(out, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, path.join(" "));
                }
                Series::Markers { points, color, .. } => {
                    for &(x, y) in points.iter().filter(|p| p.0.is_finite() && p.1.is_finite()) {
                        let _ = writeln!(out, r#"<circle cx="{}" cy="{}" r="3" fill="{color}"/>"#, f(fr.px(x)), f(fr.py(y)));
                    }
                }
                Series::ErrorBars { points, color, .. } => {
                    for &(x, y, e) in points.iter().filter(|p| p.0.is_finite() && p.1.is_finite()) {
                        let (cx, lo, hi) = (fr.px(x), fr.py(y - e), fr.py(y + e));
                        let _ = writeln!(out, r#"<line x1="{0}" y1="{1}" x2="{0}" y2="{2}" stroke="{color}"/>"#, f(cx), f(lo), f(hi));
                        let _ = writeln!(out, r#"<circle cx="{}" cy="{}" r="3" fill="{color}"/>"#, f(cx), f(fr.py(y)));
                    }
                }
                Series::Sticks { points, color, .. } => {
                    for &(x, y) in points.iter().filter(|p| p.0.is_finite() && p.1.is_finite()) {
                        let _ = writeln!(
                            out,
                            r#"<line x1="{0}" y1="{1}" x2="{0}" y2="{2}" stroke="{color}" stroke-width="2"/>"#,
                            f(fr.px(x)),
                            f(fr.py(0.0)),
                            f(fr.py(y))
                        );
                    }
                }
            }
        }
        for (i, s) in self.series.iter().enumerate() {
            let (label, color) = s.label();
            if label.is_empty() {
                continue;
            }
            let y = TOP + 15.0 + 16.0 * i as f64;
            let x = WIDTH - RIGHT - 150.0;
            let _ = writeln!(out, r#"<rect x="{}" y="{}" width="12" height="4" fill="{color}"/>"#, f(x), f(y - 4.0));
            let _ = writeln!(out, r#"<text x="{}" y="{}">{}</text>"#, f(x + 18.0), f(y + 1.0), esc(label));
        }
        out.push_str("</svg>\n");
        out
    }
}

/// Grey-scale heat map of a row-major `nx × ny` grid, x to the right and y
/// up, each cell shaded by its share of the maximum.
pub fn heatmap(title: &str, x_label: &str, y_label: &str, extent: (f64, f64, f64, f64), nx: usize, ny: usize, values: &[f64]) -> String {
    let (x0, x1, y0, y1) = extent;
    let side = 400.0;
    let fr = Frame {
        x0,
        x1,
        y0,
        y1,
        left: LEFT,
        top: TOP,
        width: side,
        height: side,
    };
    let mut out = String::new();
    header(&mut out, LEFT + side + RIGHT, TOP + side + BOTTOM);
    let vmax = values.iter().copied().fold(0.0, f64::max);
    let (cw, ch) = (side / nx as f64, side / ny as f64);
    for ix in 0..nx {
        for iy in 0..ny {
            let v = values[ix * ny + iy];
            if vmax <= 0.0 || v <= 1e-3 * vmax {
                continue;
            }
            // darker is more likely
            let shade = (255.0 * (1.0 - v / vmax)).round() as u8;
            let _ = writeln!(
                out,
                "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"rgb({shade},{shade},{shade})\"/>",
                f(LEFT + ix as f64 * cw),
                f(TOP + side - (iy + 1) as f64 * ch),
                f(cw),
                f(ch)
            );
        }
    }
    fr.axes(&mut out, title, x_label, y_label);
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ticks_are_round() {
        assert_eq!(tick_step(10.0, 5.0), 2.0);
        assert_eq!(tick_step(0.7, 6.0), 0.1);
        assert_eq!(tick_label(-0.0, 0.1), "0");
        assert_eq!(tick_label(0.30000000000000004, 0.1), "0.3");
    }

    #[test]
    fn render_is_deterministic_and_closed() {
        let p = Plot::new("t", "x", "y")
            .with(Series::Line { points: vec![(0.0, 1.0), (1.0, 2.0)], color: BLUE, label: "a".into() })
            .with(Series::ErrorBars { points: vec![(0.5, 1.5, 0.1)], color: ORANGE, label: "b & c".into() });
        let a = p.render();
        assert_eq!(a, p.render());
        assert!(a.starts_with("<svg") && a.ends_with("</svg>\n"));
        assert!(a.contains("b &amp; c"));
    }

    #[test]
    fn flat_data_gets_a_range() {
        let p = Plot::new("t", "x", "y").with(Series::Markers { points: vec![(1.0, 3.0); 4], color: GREEN, label: String::new() });
        assert!(p.render().contains("<circle"));
    }
}
