//! Minimal deterministic SVG line plots (no plotting dependency needed for
//! simple polyline charts, and hand-rolled output keeps bytes reproducible).

use std::path::Path;

use mdan::{Error, Result};

pub struct Series {
    pub name: String,
    /// (x, y) points; non-finite y values are skipped.
    pub points: Vec<(f64, f64)>,
}

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 480.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 160.0;
const MARGIN_T: f64 = 36.0;
const MARGIN_B: f64 = 44.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
];

fn fmt(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e4 || v.abs() < 1e-3 {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

/// Write a multi-series line chart. Fails on an empty series set; series
/// without finite points are drawn only in the legend.
pub fn line_svg(path: &Path, title: &str, x_label: &str, series: &[Series]) -> Result<()> {
    if series.is_empty() {
        return Err(Error::Empty(format!("plot {title:?} has no series")));
    }
    let finite: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| s.points.iter().copied())
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect();
    let (x0, x1, y0, y1) = if finite.is_empty() {
        (0.0, 1.0, 0.0, 1.0)
    } else {
        let mut b = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for (x, y) in &finite {
            b.0 = b.0.min(*x);
            b.1 = b.1.max(*x);
            b.2 = b.2.min(*y);
            b.3 = b.3.max(*y);
        }
        let pad = |lo: f64, hi: f64| {
            if lo == hi {
                (lo - 0.5, hi + 0.5)
            } else {
                (lo, hi)
            }
        };
        let (x0, x1) = pad(b.0, b.1);
        let (y0, y1) = pad(b.2, b.3);
        (x0, x1, y0, y1)
    };
    let px = |x: f64| MARGIN_L + (x - x0) / (x1 - x0) * (WIDTH - MARGIN_L - MARGIN_R);
    let py = |y: f64| HEIGHT - MARGIN_B - (y - y0) / (y1 - y0) * (HEIGHT - MARGIN_T - MARGIN_B);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"monospace\" font-size=\"12\">\n"
    ));
    svg.push_str(&format!(
        "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        MARGIN_L + (WIDTH - MARGIN_L - MARGIN_R) / 2.0,
        escape(title)
    ));
    // axes
    svg.push_str(&format!(
        "<line x1=\"{MARGIN_L}\" y1=\"{t}\" x2=\"{MARGIN_L}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{MARGIN_L}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n",
        t = MARGIN_T,
        b = HEIGHT - MARGIN_B,
        r = WIDTH - MARGIN_R
    ));
    // ticks
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let xv = x0 + f * (x1 - x0);
        let yv = y0 + f * (y1 - y0);
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
            px(xv),
            HEIGHT - MARGIN_B + 16.0,
            fmt(xv)
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>\n",
            MARGIN_L - 6.0,
            py(yv) + 4.0,
            fmt(yv)
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
        MARGIN_L + (WIDTH - MARGIN_L - MARGIN_R) / 2.0,
        HEIGHT - 8.0,
        escape(x_label)
    ));
    // series + legend
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(*y)))
            .collect();
        if pts.len() > 1 {
            svg.push_str(&format!(
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
                pts.join(" ")
            ));
        }
        let ly = MARGIN_T + 14.0 * i as f64;
        svg.push_str(&format!(
            "<line x1=\"{x}\" y1=\"{ly:.1}\" x2=\"{x2}\" y2=\"{ly:.1}\" stroke=\"{color}\" \
             stroke-width=\"2\"/>\n<text x=\"{tx}\" y=\"{ty:.1}\">{}</text>\n",
            escape(&s.name),
            x = WIDTH - MARGIN_R + 8.0,
            x2 = WIDTH - MARGIN_R + 28.0,
            tx = WIDTH - MARGIN_R + 34.0,
            ty = ly + 4.0,
        ));
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svg_is_deterministic_and_wellformed() {
        let dir = tempfile::tempdir().unwrap();
        let series = vec![
            Series {
                name: "a".into(),
                points: (0..20).map(|i| (i as f64, (i as f64 * 0.3).sin())).collect(),
            },
            Series {
                name: "b".into(),
                points: (0..20).map(|i| (i as f64, f64::NAN.max(i as f64))).collect(),
            },
        ];
        let p1 = dir.path().join("a.svg");
        let p2 = dir.path().join("b.svg");
        line_svg(&p1, "title <x>", "epoch", &series).unwrap();
        line_svg(&p2, "title <x>", "epoch", &series).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        let b2 = std::fs::read(&p2).unwrap();
        assert_eq!(b1, b2);
        let text = String::from_utf8(b1).unwrap();
        assert!(text.starts_with("<svg"));
        assert!(text.ends_with("</svg>\n"));
        assert!(text.contains("polyline"));
        assert!(text.contains("&lt;x&gt;"));
    }

    #[test]
    fn empty_series_set_rejected_and_flat_line_ok() {
        let dir = tempfile::tempdir().unwrap();
        assert!(line_svg(&dir.path().join("e.svg"), "t", "x", &[]).is_err());
        line_svg(
            &dir.path().join("flat.svg"),
            "t",
            "x",
            &[Series {
                name: "const".into(),
                points: vec![(0.0, 1.0), (1.0, 1.0)],
            }],
        )
        .unwrap();
    }
}
