//! Minimal SVG charts; no plotting dependency needed for two fixed layouts.

use std::fmt::Write;

use cosam::metrics::PrPoint;

const W: f64 = 480.0;
const H: f64 = 360.0;
const MARGIN: f64 = 50.0;

fn frame(title: &str, x_label: &str, y_label: &str) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">
<rect width="100%" height="100%" fill="white"/>
<text x="{}" y="20" text-anchor="middle" font-size="14">{title}</text>
<line x1="{MARGIN}" y1="{}" x2="{}" y2="{}" stroke="black"/>
<line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{}" stroke="black"/>
<text x="{}" y="{}" text-anchor="middle">{x_label}</text>
<text x="15" y="{}" text-anchor="middle" transform="rotate(-90 15 {})">{y_label}</text>
"#,
        W / 2.0,
        H - MARGIN,
        W - MARGIN,
        H - MARGIN,
        H - MARGIN,
        W / 2.0,
        H - 12.0,
        H / 2.0,
        H / 2.0,
    );
    for k in 0..=4 {
        let t = k as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{t:.2}</text><text x="{:.1}" y="{:.1}" text-anchor="end">{t:.2}</text>"#,
            px(t),
            H - MARGIN + 16.0,
            MARGIN - 6.0,
            py(t) + 4.0,
        );
    }
    s
}

fn px(x: f64) -> f64 {
    MARGIN + x * (W - 2.0 * MARGIN)
}

fn py(y: f64) -> f64 {
    H - MARGIN - y * (H - 2.0 * MARGIN)
}

/// Precision over recall as a step plot.
pub fn pr_curve_svg(curve: &[PrPoint], ap50: f64) -> String {
    let mut s = frame(
        &format!("PR curve (AP50 = {ap50:.3})"),
        "recall",
        "precision",
    );
    let mut points = vec![(0.0, curve.first().map_or(1.0, |p| p.precision))];
    for p in curve {
        let last_y = points.last().map_or(1.0, |q| q.1);
        points.push((p.recall, last_y));
        points.push((p.recall, p.precision));
    }
    let path: Vec<String> = points
        .iter()
        .map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(*y)))
        .collect();
    let _ = writeln!(
        s,
        r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#,
        path.join(" ")
    );
    s.push_str("</svg>\n");
    s
}

/// Histogram of values in `[0, 1]`, y axis scaled to the tallest bin.
pub fn dice_histogram_svg(values: &[f64], bins: usize) -> String {
    let bins = bins.max(1);
    let mut counts = vec![0usize; bins];
    for v in values {
        let b = ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let top = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let mut s = frame(
        &format!("Per-volume Dice (n = {}, max bin = {top})", values.len()),
        "dice",
        "fraction of max bin",
    );
    let bw = (W - 2.0 * MARGIN) / bins as f64;
    for (i, &c) in counts.iter().enumerate() {
        let h = c as f64 / top;
        let _ = writeln!(
            s,
            r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="steelblue" stroke="white"/>"#,
            px(i as f64 / bins as f64),
            py(h),
            bw,
            py(0.0) - py(h)
        );
    }
    s.push_str("</svg>\n");
    s
}
