//! Minimal SVG charts for reports: lines, bars, heatmaps.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 180.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

pub fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn header(out: &mut String, width: f64, height: f64, title: &str) {
    let _ = write!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = write!(out, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    let _ = write!(
        out,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        width / 2.0,
        escape(title)
    );
}

fn nice_range(lo: f64, hi: f64) -> (f64, f64) {
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if (hi - lo).abs() < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = (hi - lo) * 0.05;
    (lo - pad, hi + pad)
}

/// Multi-series line chart. `unit_square` fixes both axes to [0, 1] and draws the diagonal.
pub fn line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[(String, Vec<(f64, f64)>)],
    unit_square: bool,
) -> String {
    let pts = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let ((x0, x1), (y0, y1)) = if unit_square {
        ((0.0, 1.0), (0.0, 1.0))
    } else {
        (nice_range(x0, x1), nice_range(y0, y1))
    };
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + ph - (y - y0) / (y1 - y0) * ph;
    let mut out = String::new();
    header(&mut out, W, H, title);
    let _ = write!(
        out,
        r##"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>"##
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let xv = x0 + f * (x1 - x0);
        let yv = y0 + f * (y1 - y0);
        let _ = write!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            sx(xv),
            TOP + ph + 16.0,
            fmt_tick(xv)
        );
        let _ = write!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            LEFT - 6.0,
            sy(yv) + 4.0,
            fmt_tick(yv)
        );
    }
    let _ = write!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        H - 18.0,
        escape(x_label)
    );
    let _ = write!(
        out,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        escape(y_label)
    );
    if unit_square {
        let _ = write!(
            out,
            r##"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#999" stroke-dasharray="4 4"/>"##,
            sx(0.0),
            sy(0.0),
            sx(1.0),
            sy(1.0)
        );
    }
    for (i, (name, points)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = write!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            path.join(" ")
        );
        let ly = TOP + 10.0 + i as f64 * 18.0;
        let lx = W - RIGHT + 12.0;
        let _ = write!(
            out,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="3"/><text x="{}" y="{}">{}</text>"#,
            lx + 18.0,
            lx + 24.0,
            ly + 4.0,
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 100.0 || v.fract().abs() < 1e-9 {
        format!("{v:.0}")
    } else if v.abs() >= 1.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.2}")
    }
}

/// Horizontal bar chart; negative values extend left of the axis.
pub fn bar_chart(title: &str, labels: &[String], values: &[f64]) -> String {
    let row = 22.0;
    let label_w = 170.0;
    let height = TOP + BOTTOM / 2.0 + row * labels.len().max(1) as f64;
    let width = W;
    let lo = values.iter().copied().fold(0.0f64, f64::min);
    let hi = values.iter().copied().fold(0.0f64, f64::max);
    let span = if hi - lo > 0.0 { hi - lo } else { 1.0 };
    let plot_w = width - label_w - 80.0;
    let sx = |v: f64| label_w + (v - lo) / span * plot_w;
    let mut out = String::new();
    header(&mut out, width, height, title);
    for (i, (label, &v)) in labels.iter().zip(values).enumerate() {
        let y = TOP + i as f64 * row;
        let (a, b) = (sx(0.0).min(sx(v)), sx(0.0).max(sx(v)));
        let color = if v >= 0.0 { "#d62728" } else { "#1f77b4" };
        let _ = write!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text><rect x="{a:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{color}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            label_w - 6.0,
            y + row * 0.65,
            escape(label),
            y + 3.0,
            (b - a).max(0.5),
            row - 6.0,
            b + 4.0,
            y + row * 0.65,
            fmt_value(v)
        );
    }
    let _ = write!(
        out,
        r##"<line x1="{0:.1}" y1="{1}" x2="{0:.1}" y2="{2:.1}" stroke="#333"/>"##,
        sx(0.0),
        TOP,
        TOP + row * labels.len() as f64
    );
    out.push_str("</svg>\n");
    out
}

fn fmt_value(v: f64) -> String {
    if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.4}")
    }
}

/// Vertical bar histogram of `(bin_start, count)` pairs.
pub fn histogram(title: &str, x_label: &str, bins: &[(usize, usize)]) -> String {
    let max = bins.iter().map(|b| b.1).max().unwrap_or(1).max(1) as f64;
    let pw = W - LEFT - 40.0;
    let ph = H - TOP - BOTTOM;
    let bw = pw / bins.len().max(1) as f64;
    let mut out = String::new();
    header(&mut out, W, H, title);
    for (i, &(start, n)) in bins.iter().enumerate() {
        let h = n as f64 / max * ph;
        let x = LEFT + i as f64 * bw;
        let _ = write!(
            out,
            r##"<rect x="{x:.1}" y="{:.1}" width="{:.1}" height="{h:.1}" fill="#1f77b4"><title>{start}: {n}</title></rect>"##,
            TOP + ph - h,
            (bw - 1.0).max(0.5)
        );
        if bins.len() <= 20 || i % (bins.len() / 10).max(1) == 0 {
            let _ = write!(
                out,
                r#"<text x="{x:.1}" y="{:.1}">{start}</text>"#,
                TOP + ph + 16.0
            );
        }
    }
    let _ = write!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text><text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
        LEFT + pw / 2.0,
        H - 18.0,
        escape(x_label),
        LEFT - 6.0,
        TOP + 10.0,
        max
    );
    out.push_str("</svg>\n");
    out
}

/// Square heatmap with cell counts printed.
pub fn heatmap(title: &str, labels: &[String], cells: &[Vec<f64>]) -> String {
    let n = labels.len().max(1) as f64;
    let cell = 48.0;
    let size = LEFT + cell * n + 40.0;
    let max = cells.iter().flatten().copied().fold(0.0f64, f64::max).max(1e-12);
    let mut out = String::new();
    header(&mut out, size, size + 20.0, title);
    for (r, row) in cells.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            let shade = 255 - (v / max * 200.0) as u8;
            let x = LEFT + c as f64 * cell;
            let y = TOP + r as f64 * cell;
            let text_color = if shade < 140 { "white" } else { "black" };
            let _ = write!(
                out,
                r##"<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="rgb({shade},{shade},255)" stroke="#fff"/><text x="{}" y="{}" text-anchor="middle" fill="{text_color}">{}</text>"##,
                x + cell / 2.0,
                y + cell / 2.0 + 4.0,
                fmt_tick(v)
            );
        }
    }
    for (i, l) in labels.iter().enumerate() {
        let _ = write!(
            out,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text><text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            LEFT - 6.0,
            TOP + i as f64 * cell + cell / 2.0 + 4.0,
            escape(l),
            LEFT + i as f64 * cell + cell / 2.0,
            TOP + n * cell + 16.0,
            escape(l)
        );
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_well_formed() {
        let line = line_chart("t", "x", "y", &[("a&b".into(), vec![(0.0, 0.0), (1.0, 1.0)])], true);
        assert!(line.starts_with("<svg") && line.trim_end().ends_with("</svg>"));
        assert!(line.contains("a&amp;b"));
        let bars = bar_chart("t", &["x".into(), "y".into()], &[1.0, -0.5]);
        assert_eq!(bars.matches("<rect").count(), 3);
        let hist = histogram("t", "tokens", &[(0, 3), (10, 5)]);
        assert!(hist.contains("<title>10: 5</title>"));
        let heat = heatmap("t", &["0".into(), "1".into()], &[vec![1.0, 0.0], vec![0.0, 2.0]]);
        assert_eq!(heat.matches("<rect").count(), 5);
    }

    #[test]
    fn flat_series_does_not_divide_by_zero() {
        let svg = line_chart("t", "x", "y", &[("s".into(), vec![(1.0, 2.0), (1.0, 2.0)])], false);
        assert!(!svg.contains("NaN"));
    }
}
