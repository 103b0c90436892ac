//! Minimal SVG line charts: stacked panels, one polyline per series.

use std::fmt::Write;

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

pub struct Panel {
    pub title: String,
    pub x_label: String,
    pub series: Vec<Series>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

pub fn render(panels: &[Panel]) -> String {
    let (width, panel_h, margin) = (720.0, 280.0, 56.0);
    let height = panel_h * panels.len() as f64;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (pi, panel) in panels.iter().enumerate() {
        let top = pi as f64 * panel_h;
        let (x0, x1) = (margin, width - 130.0);
        let (y0, y1) = (top + panel_h - margin * 0.7, top + margin * 0.6);
        let pts = || panel.series.iter().flat_map(|s| s.points.iter());
        let (xmin, xmax) = bounds(pts().map(|p| p.0));
        let (ymin, ymax) = bounds(pts().map(|p| p.1));
        let sx = |x: f64| x0 + (x - xmin) / (xmax - xmin) * (x1 - x0);
        let sy = |y: f64| y0 + (y - ymin) / (ymax - ymin) * (y1 - y0);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="13" font-weight="bold">{}</text>"#,
            x0,
            top + 22.0,
            escape(&panel.title)
        );
        let _ = writeln!(
            s,
            r#"<path d="M{x0},{y1} L{x0},{y0} L{x1},{y0}" fill="none" stroke="black"/>"#
        );
        for (v, y) in [(ymin, y0), (ymax, y1)] {
            let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{v:.3}</text>"#, x0 - 4.0, y + 4.0);
        }
        for (v, x) in [(xmin, x0), (xmax, x1)] {
            let _ = writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle">{v}</text>"#, y0 + 14.0);
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            (x0 + x1) / 2.0,
            y0 + 28.0,
            escape(&panel.x_label)
        );
        for (i, series) in panel.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let path: Vec<String> = series.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
                path.join(" ")
            );
            let ly = y1 + 14.0 * i as f64;
            let _ = writeln!(
                s,
                r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
                x1 + 12.0,
                x1 + 30.0,
                x1 + 34.0,
                ly + 4.0,
                escape(&series.label)
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_one_polyline_per_series() {
        let panel = Panel {
            title: "loss <total>".into(),
            x_label: "round".into(),
            series: vec![
                Series {
                    label: "a".into(),
                    points: vec![(0.0, 1.0), (1.0, 0.5)],
                },
                Series {
                    label: "b".into(),
                    points: vec![(0.0, 2.0)],
                },
            ],
        };
        let svg = render(&[panel]);
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("loss &lt;total&gt;"));
        assert!(!svg.contains("NaN"));
    }

    #[test]
    fn empty_panel_still_renders() {
        let svg = render(&[Panel {
            title: "empty".into(),
            x_label: "round".into(),
            series: vec![],
        }]);
        assert!(!svg.contains("NaN") && !svg.contains("inf"));
    }
}
