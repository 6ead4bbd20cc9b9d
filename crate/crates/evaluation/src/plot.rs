//! Minimal SVG charts for score bars and embedding projections.

use std::fmt::Write;

use crate::embedding::{EmbeddingRow, Z_OPTIMAL_ID, Z_STAR_ID};

const W: f64 = 480.0;
const H: f64 = 320.0;
const PAD: f64 = 40.0;

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{}</text>"#, W / 2.0, escape(title));
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Bars of `(label, mean, std)` with error whiskers.
pub fn score_bars_svg(title: &str, bars: &[(String, f64, f64)]) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let hi = bars.iter().map(|b| b.1 + b.2).fold(0.0f64, f64::max).max(1.0);
    let lo = bars.iter().map(|b| b.1 - b.2).fold(0.0f64, f64::min);
    let y = |v: f64| H - PAD - (v - lo) / (hi - lo) * (H - 2.0 * PAD);
    let slot = (W - 2.0 * PAD) / bars.len().max(1) as f64;
    let _ = writeln!(out, r#"<line x1="{PAD}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/>"#, y(0.0), W - PAD);
    for (i, (label, mean, std)) in bars.iter().enumerate() {
        let x = PAD + slot * (i as f64 + 0.2);
        let (top, base) = (y(*mean).min(y(0.0)), y(*mean).max(y(0.0)));
        let _ = writeln!(
            out,
            r##"<rect x="{x:.1}" y="{top:.1}" width="{:.1}" height="{:.1}" fill="#4878a8"/>"##,
            slot * 0.6,
            base - top
        );
        let cx = x + slot * 0.3;
        let _ = writeln!(
            out,
            r#"<line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="black"/>"#,
            y(mean + std),
            y(mean - std)
        );
        let _ = writeln!(out, r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, H - PAD + 14.0, escape(label));
        let _ = writeln!(out, r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">{mean:.1}</text>"#, y(mean + std) - 4.0);
    }
    out.push_str("</svg>\n");
    out
}

/// Scatter of the 2-D projections, shaded from low (red) to high (blue)
/// return, with the two marker rows drawn as labelled crosses.
pub fn projection_scatter_svg(title: &str, rows: &[EmbeddingRow]) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let xs: Vec<f64> = rows.iter().map(|r| r.proj[0]).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.proj[1]).collect();
    let range = |v: &[f64]| {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo { (lo, hi) } else { (lo - 1.0, lo + 1.0) }
    };
    let (x0, x1) = range(&xs);
    let (y0, y1) = range(&ys);
    let px = |v: f64| PAD + (v - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let py = |v: f64| H - PAD - (v - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let returns: Vec<f64> = rows
        .iter()
        .filter(|r| r.id != Z_OPTIMAL_ID)
        .filter_map(|r| r.true_return)
        .collect();
    let (r0, r1) = range(&returns);
    for r in rows {
        let (x, y) = (px(r.proj[0]), py(r.proj[1]));
        if r.id == Z_STAR_ID || r.id == Z_OPTIMAL_ID {
            let _ = writeln!(
                out,
                r#"<path d="M{:.1},{:.1}l10,10m0,-10l-10,10" stroke="black" stroke-width="2"/><text x="{:.1}" y="{:.1}">{}</text>"#,
                x - 5.0,
                y - 5.0,
                x + 7.0,
                y - 7.0,
                r.id
            );
            continue;
        }
        let t = r.true_return.map_or(0.5, |v| ((v - r0) / (r1 - r0)).clamp(0.0, 1.0));
        let _ = writeln!(
            out,
            r#"<circle cx="{x:.1}" cy="{y:.1}" r="3" fill="rgb({},{},{})" fill-opacity="0.8"/>"#,
            (220.0 * (1.0 - t)) as u8,
            60,
            (220.0 * t) as u8
        );
    }
    out.push_str("</svg>\n");
    out
}
