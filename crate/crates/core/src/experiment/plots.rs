//! Self-contained SVG renderings of a fidelity report: one marginal
//! histogram overlay per feature and one heatmap per association matrix.
//! All coordinates are printed with fixed precision so output is
//! byte-reproducible.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::artifacts::write_atomic;
use crate::error::Result;
use crate::fidelity::{AssociationMatrix, FidelityReport, Histogram};

const REAL_COLOR: &str = "#4c72b0";
const SYNTH_COLOR: &str = "#dd8452";

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

/// File-name fragment for a feature name.
pub fn slug(name: &str) -> String {
    let mut out = String::new();
    for c in name.chars() {
        if c.is_ascii_alphanumeric() {
            out.push(c.to_ascii_lowercase());
        } else if !out.ends_with('_') {
            out.push('_');
        }
    }
    let trimmed = out.trim_matches('_');
    if trimmed.is_empty() {
        "feature".into()
    } else {
        trimmed.into()
    }
}

fn frequencies(counts: &[u64]) -> Vec<f64> {
    let total: u64 = counts.iter().sum();
    counts
        .iter()
        .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
        .collect()
}

/// Step outline of a binned frequency series, as SVG path data.
fn step_path(freq: &[f64], x0: f64, bin_w: f64, y0: f64, y_scale: f64) -> String {
    let mut d = format!("M{:.2},{:.2}", x0, y0);
    for (k, f) in freq.iter().enumerate() {
        let y = y0 - f * y_scale;
        let xa = x0 + bin_w * k as f64;
        let _ = write!(d, " L{:.2},{:.2} L{:.2},{:.2}", xa, y, xa + bin_w, y);
    }
    let _ = write!(d, " L{:.2},{:.2} Z", x0 + bin_w * freq.len() as f64, y0);
    d
}

/// Real (filled) and synthetic (outlined) frequency histograms on shared
/// bins. Both series go through the same path builder, so equal counts give
/// equal path data.
pub fn histogram_svg(h: &Histogram) -> String {
    let (w, ht) = (520.0, 320.0);
    let (left, right, top, bottom) = (50.0, 20.0, 40.0, 70.0);
    let plot_w = w - left - right;
    let plot_h = ht - top - bottom;
    let n = h.real.len().max(1);
    let bin_w = plot_w / n as f64;
    let (fr, fs) = (frequencies(&h.real), frequencies(&h.synthetic));
    let peak = fr.iter().chain(&fs).cloned().fold(0.0, f64::max);
    let y_scale = if peak > 0.0 { plot_h / peak } else { 0.0 };
    let y0 = top + plot_h;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{ht}" viewBox="0 0 {w} {ht}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{ht}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="14">{} ({})</text>"#,
        w / 2.0,
        escape(&h.feature),
        escape(&h.scale)
    );
    let _ = writeln!(
        s,
        r#"<path class="real" d="{}" fill="{REAL_COLOR}" fill-opacity="0.45" stroke="{REAL_COLOR}"/>"#,
        step_path(&fr, left, bin_w, y0, y_scale)
    );
    let _ = writeln!(
        s,
        r#"<path class="synthetic" d="{}" fill="none" stroke="{SYNTH_COLOR}" stroke-width="2"/>"#,
        step_path(&fs, left, bin_w, y0, y_scale)
    );
    let _ = writeln!(
        s,
        r##"<line x1="{left}" y1="{y0:.2}" x2="{:.2}" y2="{y0:.2}" stroke="#333"/>"##,
        left + plot_w
    );
    let _ = writeln!(
        s,
        r##"<line x1="{left}" y1="{top}" x2="{left}" y2="{y0:.2}" stroke="#333"/>"##
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{:.3}</text>"#,
        left - 4.0,
        top + 4.0,
        peak
    );
    if h.labels.is_empty() {
        if let (Some(lo), Some(hi)) = (h.edges.first(), h.edges.last()) {
            let _ = writeln!(s, r#"<text x="{left}" y="{:.1}">{:.3}</text>"#, y0 + 16.0, lo);
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.1}" text-anchor="end">{:.3}</text>"#,
                left + plot_w,
                y0 + 16.0,
                hi
            );
        }
    } else {
        for (k, label) in h.labels.iter().enumerate() {
            let x = left + bin_w * (k as f64 + 0.5);
            let _ = writeln!(
                s,
                r#"<text x="{x:.2}" y="{:.1}" text-anchor="end" transform="rotate(-30 {x:.2} {:.1})">{}</text>"#,
                y0 + 14.0,
                y0 + 14.0,
                escape(label)
            );
        }
    }
    let ly = ht - 12.0;
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{:.1}" width="12" height="10" fill="{REAL_COLOR}" fill-opacity="0.45"/><text x="{:.1}" y="{ly:.1}">real</text>"#,
        ly - 9.0,
        left + 16.0
    );
    let _ = writeln!(
        s,
        r#"<rect x="{:.1}" y="{:.1}" width="12" height="10" fill="none" stroke="{SYNTH_COLOR}" stroke-width="2"/><text x="{:.1}" y="{ly:.1}">synthetic</text>"#,
        left + 70.0,
        ly - 9.0,
        left + 86.0
    );
    s.push_str("</svg>\n");
    s
}

/// Diverging blue-white-red fill for a value in [-1, 1].
fn tile_color(v: f64) -> String {
    let v = v.clamp(-1.0, 1.0);
    let (r, g, b) = if v >= 0.0 { (178.0, 24.0, 43.0) } else { (33.0, 102.0, 172.0) };
    let t = v.abs();
    let mix = |c: f64| (255.0 + (c - 255.0) * t).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(r), mix(g), mix(b))
}

/// Heatmap of an association matrix. Defined tiles are colored and
/// labeled with their value; UNDEFINED tiles are hatched and unlabeled.
pub fn heatmap_svg(title: &str, m: &AssociationMatrix) -> String {
    let n = m.len();
    let cell = 64.0;
    let (left, top) = (130.0, 130.0);
    let w = left + cell * n as f64 + 20.0;
    let h = top + cell * n as f64 + 20.0;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    s.push_str(
        r##"<defs><pattern id="hatch" patternUnits="userSpaceOnUse" width="6" height="6" patternTransform="rotate(45)"><rect width="6" height="6" fill="#ffffff"/><line x1="0" y1="0" x2="0" y2="6" stroke="#9a9a9a" stroke-width="2"/></pattern></defs>"##,
    );
    s.push('\n');
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        w / 2.0,
        escape(title)
    );
    for (i, name) in m.features.iter().enumerate() {
        let c = top + cell * (i as f64 + 0.5);
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{c:.1}" text-anchor="end" dominant-baseline="middle">{}</text>"#,
            left - 6.0,
            escape(name)
        );
        let x = left + cell * (i as f64 + 0.5);
        let _ = writeln!(
            s,
            r#"<text x="{x:.1}" y="{:.1}" transform="rotate(-45 {x:.1} {:.1})">{}</text>"#,
            top - 6.0,
            top - 6.0,
            escape(name)
        );
    }
    for i in 0..n {
        for j in 0..n {
            let (x, y) = (left + cell * j as f64, top + cell * i as f64);
            let e = m.get(i, j);
            match e.value {
                Some(v) => {
                    let _ = writeln!(
                        s,
                        r##"<rect class="tile" x="{x:.1}" y="{y:.1}" width="{cell}" height="{cell}" fill="{}" stroke="#ffffff"/>"##,
                        tile_color(v)
                    );
                    let ink = if v.abs() > 0.6 { "#ffffff" } else { "#222222" };
                    let _ = writeln!(
                        s,
                        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" dominant-baseline="middle" fill="{ink}">{:.2}</text>"#,
                        x + cell / 2.0,
                        y + cell / 2.0,
                        v
                    );
                }
                None => {
                    let _ = writeln!(
                        s,
                        r##"<rect class="undefined" x="{x:.1}" y="{y:.1}" width="{cell}" height="{cell}" fill="url(#hatch)" stroke="#ffffff"/>"##
                    );
                }
            }
        }
    }
    s.push_str("</svg>\n");
    s
}

/// File names written by [`emit_plots`], in order.
pub fn plot_names(report: &FidelityReport) -> Vec<String> {
    let mut names: Vec<String> = report
        .histograms
        .iter()
        .enumerate()
        .map(|(i, h)| format!("hist_{i:02}_{}.svg", slug(&h.feature)))
        .collect();
    names.push("assoc_real.svg".into());
    names.push("assoc_synth.svg".into());
    names
}

/// Writes every plot of `report` into `dir`, returning the paths written.
pub fn emit_plots(report: &FidelityReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir, e))?;
    let names = plot_names(report);
    let mut bodies: Vec<String> = report.histograms.iter().map(histogram_svg).collect();
    let what = format!("{} / {} / g_max {}", report.dataset, report.model, report.g_max);
    bodies.push(heatmap_svg(&format!("Real associations ({what})"), &report.assoc_real));
    bodies.push(heatmap_svg(&format!("Synthetic associations ({what})"), &report.assoc_synthetic));
    let mut written = Vec::with_capacity(names.len());
    for (name, body) in names.iter().zip(bodies) {
        let path = dir.join(name);
        write_atomic(&path, body.as_bytes())?;
        written.push(path);
    }
    Ok(written)
}
