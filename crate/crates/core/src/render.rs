//! Self-contained SVG output for matrices, dendrograms and structure reports.
//!
//! Heatmap cells use a linear scale from white at the lower bound to
//! `rgb(33, 80, 160)` at the upper bound. The bounds are `[0, 1]` widened to
//! include every value.

use std::fmt::Write;

use crate::cluster::Dendrogram;
use crate::compare::SimilarityMatrix;
use crate::error::{Error, Result};
use crate::stats::{kind_labels, LayerHistogram, StructureReport};

const CELL: f64 = 56.0;
const MARGIN: f64 = 170.0;
const HIGH: (f64, f64, f64) = (33.0, 80.0, 160.0);

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn colour(t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let mix = |hi: f64| (255.0 + (hi - 255.0) * t).round() as u8;
    format!("rgb({},{},{})", mix(HIGH.0), mix(HIGH.1), mix(HIGH.2))
}

fn header(width: f64, height: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" \
         viewBox=\"0 0 {width:.0} {height:.0}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    )
}

fn grid(
    out: &mut String,
    x0: f64,
    y0: f64,
    rows: &[String],
    cols: &[String],
    values: &[Vec<f64>],
    label: impl Fn(f64) -> String,
) {
    let (lo, hi) = values
        .iter()
        .flatten()
        .fold((0.0f64, 1.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    for (j, c) in cols.iter().enumerate() {
        let x = x0 + (j as f64 + 0.5) * CELL;
        let _ = writeln!(
            out,
            "<text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"start\" transform=\"rotate(-45 {x:.1} {:.1})\">{}</text>",
            y0 - 6.0,
            y0 - 6.0,
            escape(c)
        );
    }
    for (i, (r, row)) in rows.iter().zip(values).enumerate() {
        let y = y0 + i as f64 * CELL;
        let _ = writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>",
            x0 - 6.0,
            y + CELL / 2.0 + 4.0,
            escape(r)
        );
        for (j, &v) in row.iter().enumerate() {
            let x = x0 + j as f64 * CELL;
            let t = (v - lo) / (hi - lo);
            let ink = if t > 0.55 { "white" } else { "black" };
            let _ = writeln!(
                out,
                "<rect class=\"cell\" x=\"{x:.1}\" y=\"{y:.1}\" width=\"{CELL:.1}\" height=\"{CELL:.1}\" fill=\"{}\" stroke=\"#ccc\"/>",
                colour(t)
            );
            let _ = writeln!(
                out,
                "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" fill=\"{ink}\">{}</text>",
                x + CELL / 2.0,
                y + CELL / 2.0 + 4.0,
                label(v)
            );
        }
    }
}

/// Heatmap with numeric labels and lines between task families.
pub fn render_matrix(matrix: &SimilarityMatrix) -> Result<String> {
    let k = matrix.size();
    if k == 0 {
        return Err(Error::Matrix("empty matrix".into()));
    }
    let labels: Vec<String> = matrix.tasks.iter().map(|t| t.id.clone()).collect();
    let side = k as f64 * CELL;
    let mut out = header(MARGIN + side + 20.0, MARGIN + side + 40.0);
    let _ = writeln!(
        out,
        "<text x=\"10\" y=\"20\" font-size=\"14\">{} ({})</text>",
        matrix.metric,
        matrix.granularity
    );
    grid(&mut out, MARGIN, MARGIN, &labels, &labels, &matrix.values, |v| format!("{v:.2}"));
    for i in 1..k {
        if matrix.tasks[i].family != matrix.tasks[i - 1].family {
            let p = MARGIN + i as f64 * CELL;
            let _ = writeln!(
                out,
                "<line class=\"divider\" x1=\"{p:.1}\" y1=\"{MARGIN:.1}\" x2=\"{p:.1}\" y2=\"{:.1}\" stroke=\"black\" stroke-width=\"2\"/>",
                MARGIN + side
            );
            let _ = writeln!(
                out,
                "<line class=\"divider\" x1=\"{MARGIN:.1}\" y1=\"{p:.1}\" x2=\"{:.1}\" y2=\"{p:.1}\" stroke=\"black\" stroke-width=\"2\"/>",
                MARGIN + side
            );
        }
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Tree drawn from the merge list; link heights are proportional to merge
/// distances.
pub fn render_dendrogram(d: &Dendrogram) -> Result<String> {
    let k = d.leaves.len();
    if k == 0 {
        return Err(Error::Matrix("empty dendrogram".into()));
    }
    let (left, top, spacing, height) = (40.0, 30.0, 70.0, 300.0);
    let base = top + height;
    let max = d.merges.iter().map(|m| m.distance).fold(0.0f64, f64::max);
    let y_of = |dist: f64| if max > 0.0 { base - dist / max * height } else { base };
    let mut x = vec![0.0; k + d.merges.len()];
    let mut y = vec![base; k + d.merges.len()];
    for (slot, &leaf) in d.leaf_order().iter().enumerate() {
        x[leaf] = left + slot as f64 * spacing;
    }
    let mut out = header(left * 2.0 + (k.max(2) - 1) as f64 * spacing, base + 140.0);
    let _ = writeln!(out, "<text x=\"10\" y=\"18\" font-size=\"14\">linkage: {}</text>", d.linkage);
    for (t, m) in d.merges.iter().enumerate() {
        let c = k + t;
        let h = y_of(m.distance);
        x[c] = 0.5 * (x[m.a] + x[m.b]);
        y[c] = h;
        for child in [m.a, m.b] {
            let _ = writeln!(
                out,
                "<line class=\"link-v\" x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{h:.1}\" stroke=\"black\"/>",
                x[child], y[child], x[child]
            );
        }
        let _ = writeln!(
            out,
            "<line class=\"link-h\" x1=\"{:.1}\" y1=\"{h:.1}\" x2=\"{:.1}\" y2=\"{h:.1}\" stroke=\"black\" data-distance=\"{:.4}\"/>",
            x[m.a], x[m.b], m.distance
        );
    }
    for (leaf, name) in d.leaves.iter().enumerate() {
        let _ = writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" transform=\"rotate(-60 {:.1} {:.1})\">{}</text>",
            x[leaf],
            base + 14.0,
            x[leaf],
            base + 14.0,
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}

fn histogram(out: &mut String, x0: f64, y0: f64, title: &str, h: &LayerHistogram) {
    let (bar, height) = (28.0, 120.0);
    let max = h.counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let _ = writeln!(out, "<text x=\"{x0:.1}\" y=\"{:.1}\">{}</text>", y0 - 8.0, escape(title));
    for (i, (&b, &c)) in h.bins.iter().zip(&h.counts).enumerate() {
        let x = x0 + i as f64 * (bar + 6.0);
        let bh = c as f64 / max * height;
        let _ = writeln!(
            out,
            "<rect class=\"bar\" x=\"{x:.1}\" y=\"{:.1}\" width=\"{bar:.1}\" height=\"{bh:.1}\" fill=\"{}\"/>",
            y0 + height - bh,
            colour(1.0)
        );
        let _ = writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"10\">{b:.2}</text>",
            x + bar / 2.0,
            y0 + height + 14.0
        );
        let _ = writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"10\">{c}</text>",
            x + bar / 2.0,
            y0 + height - bh - 4.0
        );
    }
}

/// Edge-type grid of the intersection circuit and its layer histograms.
pub fn render_structure(report: &StructureReport) -> Result<String> {
    let kinds: Vec<String> = kind_labels().iter().map(|s| s.to_string()).collect();
    let values: Vec<Vec<f64>> = report.edge_types.iter().map(|r| r.iter().map(|&c| c as f64).collect()).collect();
    let bins = report.source_layers.bins.len().max(1) as f64;
    let hist_width = bins * 34.0 + 40.0;
    let width = (MARGIN + 4.0 * CELL + 40.0).max(2.0 * hist_width + 40.0);
    let mut out = header(width, MARGIN + 4.0 * CELL + 240.0);
    let _ = writeln!(
        out,
        "<text x=\"10\" y=\"20\" font-size=\"14\">intersection of {} circuits: {} edges</text>",
        report.tasks.len(),
        report.intersection.len()
    );
    let max = values.iter().flatten().copied().fold(1.0f64, f64::max);
    let scaled: Vec<Vec<f64>> = values.iter().map(|r| r.iter().map(|v| v / max).collect()).collect();
    grid(&mut out, MARGIN, MARGIN, &kinds, &kinds, &scaled, |v| format!("{:.0}", v * max));
    let y = MARGIN + 4.0 * CELL + 60.0;
    histogram(&mut out, 20.0, y, "source layer / n_layers", &report.source_layers);
    histogram(&mut out, 20.0 + hist_width, y, "target layer / n_layers", &report.target_layers);
    out.push_str("</svg>\n");
    Ok(out)
}
