//! Minimal SVG heat maps and scatter plots.

use std::fmt::Write as _;

use ccspnet::dsp::Spectrogram;

const PANEL_W: f64 = 320.0;
const PANEL_H: f64 = 220.0;
const MARGIN: f64 = 40.0;
const CLASS_COLORS: [&str; 2] = ["#1f77b4", "#d62728"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn open(out: &mut String, cols: usize, rows: usize) {
    let w = cols as f64 * (PANEL_W + MARGIN) + MARGIN;
    let h = rows as f64 * (PANEL_H + MARGIN) + MARGIN;
    let _ = writeln!(
        out,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">
<rect width="{w}" height="{h}" fill="white"/>"#
    );
}

fn origin(i: usize, cols: usize) -> (f64, f64) {
    let (c, r) = (i % cols, i / cols);
    (
        MARGIN + c as f64 * (PANEL_W + MARGIN),
        MARGIN + r as f64 * (PANEL_H + MARGIN),
    )
}

/// Viridis-like ramp from dark blue to yellow.
fn ramp(v: f64) -> String {
    let v = v.clamp(0.0, 1.0);
    let r = (68.0 + v * (253.0 - 68.0)) as u8;
    let g = (1.0 + v * (231.0 - 1.0)) as u8;
    let b = (84.0 + (1.0 - v) * (150.0 - 84.0) - v * 47.0).max(0.0) as u8;
    format!("#{r:02x}{g:02x}{b:02x}")
}

/// One heat map per spectrogram, magnitudes scaled per panel.
pub fn heat_maps(panels: &[(String, &Spectrogram)], cols: usize) -> String {
    let cols = cols.max(1);
    let rows = panels.len().div_ceil(cols);
    let mut out = String::new();
    open(&mut out, cols, rows);
    for (i, (title, spec)) in panels.iter().enumerate() {
        let (x0, y0) = origin(i, cols);
        let n_bins = spec.freqs_hz.len();
        let n_frames = spec.times_s.len();
        let max = spec
            .magnitudes
            .iter()
            .flatten()
            .fold(0.0f64, |a, b| a.max(*b));
        let cw = PANEL_W / n_frames.max(1) as f64;
        let ch = PANEL_H / n_bins.max(1) as f64;
        let _ = writeln!(
            out,
            r#"<g><text x="{x0}" y="{}">{}</text>"#,
            y0 - 6.0,
            escape(title)
        );
        for (b, row) in spec.magnitudes.iter().enumerate() {
            for (f, m) in row.iter().enumerate() {
                let v = if max > 0.0 { m / max } else { 0.0 };
                let _ = writeln!(
                    out,
                    r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                    x0 + f as f64 * cw,
                    y0 + PANEL_H - (b + 1) as f64 * ch,
                    cw + 0.05,
                    ch + 0.05,
                    ramp(v)
                );
            }
        }
        let f_max = spec.freqs_hz.last().copied().unwrap_or(0.0);
        let t_max = spec.times_s.last().copied().unwrap_or(0.0);
        let _ = writeln!(
            out,
            r#"<text x="{x0}" y="{:.1}">0-{t_max:.2} s, 0-{f_max:.0} Hz</text></g>"#,
            y0 + PANEL_H + 14.0
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Scatter panels of `(x, y, label)` points, colored by class.
pub fn scatter(panels: &[(String, Vec<(f64, f64, u8)>)], cols: usize) -> String {
    let cols = cols.max(1);
    let rows = panels.len().div_ceil(cols);
    let mut out = String::new();
    open(&mut out, cols, rows);
    for (i, (title, points)) in panels.iter().enumerate() {
        let (x0, y0) = origin(i, cols);
        let bounds = |sel: fn(&(f64, f64, u8)) -> f64| {
            let lo = points.iter().map(sel).fold(f64::INFINITY, f64::min);
            let hi = points.iter().map(sel).fold(f64::NEG_INFINITY, f64::max);
            if lo.is_finite() && hi > lo {
                (lo, hi)
            } else {
                (lo.min(0.0) - 1.0, hi.max(0.0) + 1.0)
            }
        };
        let (xl, xh) = bounds(|p| p.0);
        let (yl, yh) = bounds(|p| p.1);
        let _ = writeln!(
            out,
            r#"<g><text x="{x0}" y="{}">{}</text>"#,
            y0 - 6.0,
            escape(title)
        );
        let _ = writeln!(
            out,
            r##"<rect x="{x0}" y="{y0}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="#888"/>"##
        );
        for (x, y, label) in points {
            let px = x0 + (x - xl) / (xh - xl) * PANEL_W;
            let py = y0 + PANEL_H - (y - yl) / (yh - yl) * PANEL_H;
            let _ = writeln!(
                out,
                r#"<circle cx="{px:.2}" cy="{py:.2}" r="2.5" fill="{}" fill-opacity="0.7"/>"#,
                CLASS_COLORS[(*label != 0) as usize]
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{x0}" y="{:.1}">x {xl:.2} to {xh:.2}, y {yl:.2} to {yh:.2}</text></g>"#,
            y0 + PANEL_H + 14.0
        );
    }
    out.push_str("</svg>\n");
    out
}
