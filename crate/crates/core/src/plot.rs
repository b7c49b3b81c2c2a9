//! Minimal SVG line and grouped-bar charts for ablation grids.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 56.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

pub struct Series {
    pub label: String,
    /// One value per x tick; NaN leaves a gap.
    pub values: Vec<f64>,
}

pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub x_ticks: Vec<String>,
    pub series: Vec<Series>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

impl Chart {
    /// y range `[0, max(1, top value)]`.
    fn y_max(&self) -> f64 {
        self.series
            .iter()
            .flat_map(|s| s.values.iter().copied())
            .filter(|v| v.is_finite())
            .fold(1.0, f64::max)
    }

    fn y(&self, v: f64) -> f64 {
        TOP + (H - TOP - BOTTOM) * (1.0 - v / self.y_max())
    }

    fn frame(&self, out: &mut String) {
        let (x0, x1, y1) = (LEFT, W - RIGHT, H - BOTTOM);
        let _ = write!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">
<rect width="{W}" height="{H}" fill="white"/>
<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>
<line x1="{x0}" y1="{TOP}" x2="{x0}" y2="{y1}" stroke="black"/>
<line x1="{x0}" y1="{y1}" x2="{x1}" y2="{y1}" stroke="black"/>
<text x="{}" y="{}" text-anchor="middle">{}</text>
<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>
"#,
            W / 2.0,
            escape(&self.title),
            (x0 + x1) / 2.0,
            H - 14.0,
            escape(&self.x_label),
            (TOP + y1) / 2.0,
            (TOP + y1) / 2.0,
            escape(&self.y_label),
        );
        let top = self.y_max();
        for i in 0..=5 {
            let v = top * i as f64 / 5.0;
            let y = self.y(v);
            let _ = writeln!(
                out,
                r##"<line x1="{}" y1="{y:.1}" x2="{x1}" y2="{y:.1}" stroke="#ddd"/><text x="{}" y="{:.1}" text-anchor="end">{v:.2}</text>"##,
                x0 + 1.0,
                x0 - 6.0,
                y + 4.0
            );
        }
        for (i, s) in self.series.iter().enumerate() {
            let y = TOP + 10.0 + 20.0 * i as f64;
            let _ = writeln!(
                out,
                r#"<rect x="{}" y="{}" width="12" height="12" fill="{}"/><text x="{}" y="{}">{}</text>"#,
                W - RIGHT + 16.0,
                y - 10.0,
                COLORS[i % COLORS.len()],
                W - RIGHT + 34.0,
                y,
                escape(&s.label)
            );
        }
    }

    fn slot(&self, k: usize) -> (f64, f64) {
        let width = (W - RIGHT - LEFT) / self.x_ticks.len().max(1) as f64;
        (LEFT + width * (k as f64 + 0.5), width)
    }

    fn x_ticks(&self, out: &mut String) {
        for (k, t) in self.x_ticks.iter().enumerate() {
            let (x, _) = self.slot(k);
            let _ = writeln!(
                out,
                r#"<text x="{x:.1}" y="{}" text-anchor="middle">{}</text>"#,
                H - BOTTOM + 18.0,
                escape(t)
            );
        }
    }

    /// Each series as a polyline with point markers over categorical x.
    pub fn line_svg(&self) -> String {
        let mut out = String::new();
        self.frame(&mut out);
        self.x_ticks(&mut out);
        for (i, s) in self.series.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let pts: Vec<(f64, f64)> = s
                .values
                .iter()
                .enumerate()
                .filter(|(_, v)| v.is_finite())
                .map(|(k, &v)| (self.slot(k).0, self.y(v)))
                .collect();
            let path: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.1},{y:.1}")).collect();
            let _ = writeln!(
                out,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                path.join(" ")
            );
            for (x, y) in pts {
                let _ = writeln!(out, r#"<circle cx="{x:.1}" cy="{y:.1}" r="3.5" fill="{color}"/>"#);
            }
        }
        out.push_str("</svg>\n");
        out
    }

    /// Grouped bars: one group per x tick, one bar per series.
    pub fn bar_svg(&self) -> String {
        let mut out = String::new();
        self.frame(&mut out);
        self.x_ticks(&mut out);
        let n = self.series.len().max(1) as f64;
        for (i, s) in self.series.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            for (k, &v) in s.values.iter().enumerate() {
                if !v.is_finite() {
                    continue;
                }
                let (cx, width) = self.slot(k);
                let bar = 0.8 * width / n;
                let x = cx - 0.4 * width + bar * i as f64;
                let y = self.y(v);
                let _ = writeln!(
                    out,
                    r#"<rect x="{x:.1}" y="{y:.1}" width="{:.1}" height="{:.1}" fill="{color}"/>"#,
                    bar - 2.0,
                    (H - BOTTOM - y).max(0.0)
                );
            }
        }
        out.push_str("</svg>\n");
        out
    }
}
