//! Self-contained SVG line plots with a logarithmic BER axis.

use std::fmt::Write as _;

/// Hard-decision FEC threshold.
pub const FEC_LIMIT: f64 = 3.8e-3;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 480.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

pub struct LogPlot<'a> {
    pub title: &'a str,
    pub x_label: &'a str,
    pub y_label: &'a str,
    pub series: &'a [Series],
    /// Horizontal reference lines with labels.
    pub references: &'a [(f64, &'a str)],
    pub config_hash: &'a str,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

impl LogPlot<'_> {
    /// Zero or negative values sit on the lower edge as hollow markers.
    pub fn render(&self) -> String {
        let xs: Vec<f64> = self.series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
        let ys: Vec<f64> = self
            .series
            .iter()
            .flat_map(|s| s.points.iter().map(|p| p.1))
            .chain(self.references.iter().map(|r| r.0))
            .filter(|y| *y > 0.0 && y.is_finite())
            .collect();
        let (mut x0, mut x1) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
        if !x0.is_finite() {
            (x0, x1) = (0.0, 1.0);
        }
        if x1 - x0 < 1e-12 {
            x0 -= 1.0;
            x1 += 1.0;
        }
        let lo = ys.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (d0, d1) = if lo.is_finite() {
            (lo.log10().floor() - 1.0, hi.log10().ceil().max(lo.log10().floor()))
        } else {
            (-6.0, 0.0)
        };
        let d1 = d1.min(0.0).max(d0 + 1.0);
        let pw = WIDTH - LEFT - RIGHT;
        let ph = HEIGHT - TOP - BOTTOM;
        let px = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
        let py = |y: f64| {
            let d = if y > 0.0 { y.log10().clamp(d0, d1) } else { d0 };
            TOP + (d1 - d) / (d1 - d0) * ph
        };

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, "<!-- config_hash: {} -->", self.config_hash);
        let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
            LEFT + pw / 2.0,
            escape(self.title)
        );
        for d in (d0 as i64)..=(d1 as i64) {
            let y = py(10f64.powi(d as i32));
            let _ = writeln!(s, r##"<line x1="{LEFT}" y1="{y}" x2="{}" y2="{y}" stroke="#ddd"/>"##, LEFT + pw);
            let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">1e{d}</text>"#, LEFT - 6.0, y + 4.0);
        }
        for i in 0..=5 {
            let x = x0 + (x1 - x0) * i as f64 / 5.0;
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
                px(x),
                TOP + ph + 18.0,
                (x * 100.0).round() / 100.0
            );
        }
        let _ = writeln!(s, r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            LEFT + pw / 2.0,
            HEIGHT - 16.0,
            escape(self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text x="20" y="{}" text-anchor="middle" transform="rotate(-90 20 {})">{}</text>"#,
            TOP + ph / 2.0,
            TOP + ph / 2.0,
            escape(self.y_label)
        );
        for (value, label) in self.references {
            let y = py(*value);
            let _ = writeln!(
                s,
                r##"<line x1="{LEFT}" y1="{y}" x2="{}" y2="{y}" stroke="#444" stroke-dasharray="6 4"/>"##,
                LEFT + pw
            );
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
                LEFT + pw - 4.0,
                y - 4.0,
                escape(label)
            );
        }
        for (i, series) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let path: Vec<String> = series.points.iter().map(|&(x, y)| format!("{},{}", px(x), py(y))).collect();
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
                path.join(" ")
            );
            for &(x, y) in &series.points {
                let fill = if y > 0.0 { color } else { "white" };
                let _ = writeln!(s, r#"<circle cx="{}" cy="{}" r="3.5" fill="{fill}" stroke="{color}"/>"#, px(x), py(y));
            }
            let ly = TOP + 14.0 + 18.0 * i as f64;
            let _ = writeln!(
                s,
                r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
                LEFT + pw + 12.0,
                LEFT + pw + 32.0
            );
            let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, LEFT + pw + 38.0, ly + 4.0, escape(&series.label));
        }
        s.push_str("</svg>\n");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_reference_line_and_hash() {
        let series = [Series {
            label: "fde".into(),
            points: vec![(-2.0, 1e-3), (0.0, 1e-4), (2.0, 0.0)],
        }];
        let plot = LogPlot {
            title: "t",
            x_label: "power",
            y_label: "BER",
            series: &series,
            references: &[(FEC_LIMIT, "HD-FEC")],
            config_hash: "abc",
        };
        let svg = plot.render();
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert!(svg.contains("config_hash: abc"));
        assert!(svg.contains("stroke-dasharray"));
        assert!(svg.contains("1e-5"));
        assert!(svg.contains(r##"fill="white" stroke="#1f77b4""##));
        assert_eq!(svg, plot.render());
    }
}
