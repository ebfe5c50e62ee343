//! Minimal log-log SVG plots: scatter series with optional fitted lines.

use std::fmt::Write as _;

#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// `(slope, intercept)` of a line in log-log coordinates.
    pub fit: Option<(f64, f64)>,
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];
const W: f64 = 640.0;
const H: f64 = 440.0;
const M: f64 = 60.0;

/// Renders the series on log10 axes. Nonpositive values are skipped.
pub fn loglog_svg(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let pts: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| s.x.iter().zip(&s.y).map(|(a, b)| (*a, *b)))
        .filter(|(a, b)| *a > 0.0 && *b > 0.0 && a.is_finite() && b.is_finite())
        .map(|(a, b)| (a.log10(), b.log10()))
        .collect();
    let (mut x0, mut x1, mut y0, mut y1) = bounds(&pts);
    if x1 - x0 < 1e-9 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if y1 - y0 < 1e-9 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let padx = 0.05 * (x1 - x0);
    let pady = 0.05 * (y1 - y0);
    let (x0, x1, y0, y1) = (x0 - padx, x1 + padx, y0 - pady, y1 + pady);
    let sx = |v: f64| M + (v - x0) / (x1 - x0) * (W - 2.0 * M);
    let sy = |v: f64| H - M - (v - y0) / (y1 - y0) * (H - 2.0 * M);

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, esc(title));
    let _ = writeln!(
        out,
        r#"<rect x="{M}" y="{M}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - 2.0 * M,
        H - 2.0 * M
    );
    for k in (x0.ceil() as i64)..=(x1.floor() as i64) {
        let px = sx(k as f64);
        let _ = writeln!(out, r##"<line x1="{px:.1}" y1="{}" x2="{px:.1}" y2="{}" stroke="#ddd"/>"##, M, H - M);
        let _ = writeln!(out, r#"<text x="{px:.1}" y="{}" text-anchor="middle">1e{k}</text>"#, H - M + 16.0);
    }
    for k in (y0.ceil() as i64)..=(y1.floor() as i64) {
        let py = sy(k as f64);
        let _ = writeln!(out, r##"<line x1="{M}" y1="{py:.1}" x2="{}" y2="{py:.1}" stroke="#ddd"/>"##, W - M);
        let _ = writeln!(out, r#"<text x="{}" y="{:.1}" text-anchor="end">1e{k}</text>"#, M - 4.0, py + 4.0);
    }
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 15.0, esc(x_label));
    let _ = writeln!(
        out,
        r#"<text x="15" y="{}" text-anchor="middle" transform="rotate(-90 15 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        esc(y_label)
    );
    for (i, s) in series.iter().enumerate() {
        let c = COLORS[i % COLORS.len()];
        for (a, b) in s.x.iter().zip(&s.y) {
            if *a > 0.0 && *b > 0.0 {
                let _ = writeln!(out, r#"<circle cx="{:.1}" cy="{:.1}" r="3.5" fill="{c}"/>"#, sx(a.log10()), sy(b.log10()));
            }
        }
        if let Some((slope, icpt)) = s.fit {
            // fit is in natural logs; convert to log10 axes
            let xs: Vec<f64> = s.x.iter().filter(|v| **v > 0.0).map(|v| v.log10()).collect();
            if let (Some(lo), Some(hi)) = (
                xs.iter().copied().reduce(f64::min),
                xs.iter().copied().reduce(f64::max),
            ) {
                let f = |lx: f64| slope * lx + icpt / std::f64::consts::LN_10;
                let _ = writeln!(
                    out,
                    r#"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="{c}" stroke-width="1.5"/>"#,
                    sx(lo),
                    sy(f(lo)),
                    sx(hi),
                    sy(f(hi))
                );
            }
        }
        let label = match s.fit {
            Some((slope, _)) => format!("{} (slope {slope:.2})", s.label),
            None => s.label.clone(),
        };
        let ly = M + 16.0 + 16.0 * i as f64;
        let _ = writeln!(out, r#"<circle cx="{}" cy="{:.1}" r="4" fill="{c}"/>"#, M + 12.0, ly - 4.0);
        let _ = writeln!(out, r#"<text x="{}" y="{ly:.1}">{}</text>"#, M + 22.0, esc(&label));
    }
    out.push_str("</svg>\n");
    out
}

fn bounds(pts: &[(f64, f64)]) -> (f64, f64, f64, f64) {
    if pts.is_empty() {
        return (0.0, 1.0, 0.0, 1.0);
    }
    let mut b = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in pts {
        b.0 = b.0.min(*x);
        b.1 = b.1.max(*x);
        b.2 = b.2.min(*y);
        b.3 = b.3.max(*y);
    }
    b
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_points_and_line() {
        let s = Series {
            label: "a<b".into(),
            x: vec![10.0, 100.0, 1000.0],
            y: vec![1.0, 0.1, 0.01],
            fit: Some((-1.0, 0.0)),
        };
        let svg = loglog_svg("t", "n", "err", &[s]);
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("<circle").count(), 4);
        assert!(svg.contains("a&lt;b"));
        assert!(svg.contains("slope -1.00"));
    }
}
