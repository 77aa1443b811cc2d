//! Minimal self-contained SVG output: accuracy curves and mask heatmaps.

use std::fmt::Write as _;

use crate::evaluator::{format_rho, MetricsTable};
use crate::masker::{MaskSelection, RankGrid};
use crate::video::Clip;

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Top-1 accuracy against observation ratio, one polyline per labeled table.
pub fn accuracy_chart(series: &[(String, MetricsTable)], title: &str) -> String {
    let (w, h) = (640.0, 420.0);
    let (left, right, top, bottom) = (60.0, 170.0, 40.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let rhos = series.iter().flat_map(|(_, t)| t.rows.iter().map(|r| r.rho));
    let (mut x0, mut x1) = (0.1f64, 0.9f64);
    for r in rhos {
        x0 = x0.min(r);
        x1 = x1.max(r);
    }
    if x1 - x0 < 1e-9 {
        x1 = x0 + 0.1;
    }
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + (1.0 - y) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#, left + pw / 2.0, escape(title));
    // axes and grid
    let _ = writeln!(
        s,
        r#"<g stroke="black"><line x1="{left}" y1="{}" x2="{}" y2="{}"/><line x1="{left}" y1="{top}" x2="{left}" y2="{}"/></g>"#,
        top + ph,
        left + pw,
        top + ph,
        top + ph
    );
    for i in 0..=5 {
        let y = i as f64 / 5.0;
        let py = sy(y);
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{py}" x2="{}" y2="{py}" stroke="#ddd"/><text x="{}" y="{}" text-anchor="end">{y:.1}</text>"##,
            left + pw,
            left - 6.0,
            py + 4.0
        );
    }
    let ticks = ((x1 - x0) / 0.1).round().max(1.0) as usize;
    for i in 0..=ticks {
        let x = x0 + (x1 - x0) * i as f64 / ticks as f64;
        let px = sx(x);
        let _ = writeln!(
            s,
            r#"<line x1="{px}" y1="{}" x2="{px}" y2="{}" stroke="black"/><text x="{px}" y="{}" text-anchor="middle">{}</text>"#,
            top + ph,
            top + ph + 5.0,
            top + ph + 18.0,
            format_rho((x * 1e6).round() / 1e6)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">observation ratio</text>"#,
        left + pw / 2.0,
        h - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">top-1 accuracy</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    );
    for (i, (label, table)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> =
            table.rows.iter().map(|r| format!("{:.2},{:.2}", sx(r.rho), sy(r.top1.clamp(0.0, 1.0)))).collect();
        let _ = writeln!(
            s,
            r#"<polyline class="curve" data-label="{}" fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            escape(label),
            pts.join(" ")
        );
        for p in &pts {
            let (x, y) = p.split_once(',').unwrap();
            let _ = writeln!(s, r#"<circle cx="{x}" cy="{y}" r="3" fill="{color}"/>"#);
        }
        let ly = top + 10.0 + 20.0 * i as f64;
        let lx = left + pw + 15.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Frames of the clip in a row with masked tubelets shaded, annotated with ranks.
pub fn mask_heatmap(clip: &Clip, sel: &MaskSelection, ranks: &RankGrid, patch: usize, tubelet: usize) -> String {
    let scale = 6usize;
    let (fh, fw) = (clip.height() * scale, clip.width() * scale);
    let gap = 8;
    let w = clip.frames() * (fw + gap) + gap;
    let h = fh + 2 * gap + 20;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="monospace" font-size="9">"#
    );
    let _ = writeln!(s, r##"<rect width="{w}" height="{h}" fill="#222"/>"##);
    for t in 0..clip.frames() {
        let ox = gap + t * (fw + gap);
        let oy = gap + 14;
        let _ = writeln!(s, r##"<text x="{ox}" y="{}" fill="#eee">t={t}</text>"##, gap + 8);
        let _ = writeln!(s, r#"<g transform="translate({ox},{oy})">"#);
        for y in 0..clip.height() {
            for x in 0..clip.width() {
                let v = clip.pixel(t, y, x, 0);
                let _ = writeln!(
                    s,
                    r#"<rect x="{}" y="{}" width="{scale}" height="{scale}" fill="rgb({v},{v},{v})"/>"#,
                    x * scale,
                    y * scale
                );
            }
        }
        let step = t / tubelet;
        for i in 0..sel.shape.rows {
            for j in 0..sel.shape.cols {
                let (px, py, side) = (j * patch * scale, i * patch * scale, patch * scale);
                if sel.is_kept(step, i, j) {
                    let _ = writeln!(
                        s,
                        r##"<rect class="kept" x="{px}" y="{py}" width="{side}" height="{side}" fill="none" stroke="#4c4" stroke-width="1"/>"##
                    );
                } else {
                    let _ = writeln!(
                        s,
                        r##"<rect class="masked" x="{px}" y="{py}" width="{side}" height="{side}" fill="#c33" fill-opacity="0.55"/>"##
                    );
                }
                if t % tubelet == 0 {
                    let _ = writeln!(
                        s,
                        r##"<text x="{}" y="{}" fill="#ff0">{}</text>"##,
                        px + 2,
                        py + 10,
                        ranks.get(step, i, j)
                    );
                }
            }
        }
        s.push_str("</g>\n");
    }
    s.push_str("</svg>\n");
    s
}
