//! Scatter plots of 2-D embeddings.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use eegvae_core::io::atomic_write;
use eegvae_core::rng::named_stream;
use eegvae_core::{Label, RowMeta};
use rand::seq::SliceRandom;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tsne::Embedding2D;

const OBESE_COLOR: &str = "#1f5fbf";
const LEAN_COLOR: &str = "#d9481c";
const BACKGROUND_COLOR: &str = "#d0d0d0";
const SUBJECT_PALETTE: [&str; 10] =
    ["#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d", "#1f78b4", "#b2182b", "#4d4d4d"];

const SIZE: f64 = 640.0;
const MARGIN: f64 = 40.0;
const LEGEND_WIDTH: f64 = 160.0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ColorBy {
    Class,
    /// One colour per listed subject; every other point is drawn in grey.
    Subjects(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LegendEntry {
    pub label: String,
    pub color: String,
}

/// Seeded choice of `per_class` obese and `per_class` lean subjects, obese first.
pub fn pick_subjects(rows: &[RowMeta], per_class: usize, seed: u64) -> Result<Vec<String>> {
    let mut picked = Vec::new();
    for label in [Label::Obese, Label::Lean] {
        let mut pool: Vec<String> =
            rows.iter().filter(|r| r.label == label).map(|r| r.subject_id.clone()).collect::<BTreeSet<_>>().into_iter().collect();
        if pool.len() < per_class {
            return Err(Error::InvalidConfig(format!("only {} {label} subjects, asked for {per_class}", pool.len())));
        }
        pool.shuffle(&mut named_stream(seed, &format!("viz/subjects/{label}")));
        picked.extend(pool.into_iter().take(per_class));
    }
    Ok(picked)
}

fn subject_color(k: usize) -> String {
    match SUBJECT_PALETTE.get(k) {
        Some(c) => c.to_string(),
        None => format!("hsl({},70%,45%)", (k * 137) % 360),
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// SVG document for an embedding, plus the legend it carries.
pub fn scatter_svg(emb: &Embedding2D, color_by: &ColorBy, title: &str) -> Result<(String, Vec<LegendEntry>)> {
    if emb.is_empty() {
        return Err(Error::Empty("embedding".into()));
    }
    if emb.coords.iter().any(|c| !c[0].is_finite() || !c[1].is_finite()) {
        return Err(Error::NonFinite("embedding coordinates".into()));
    }

    let legend: Vec<LegendEntry> = match color_by {
        ColorBy::Class => vec![
            LegendEntry { label: "obese".into(), color: OBESE_COLOR.into() },
            LegendEntry { label: "lean".into(), color: LEAN_COLOR.into() },
        ],
        ColorBy::Subjects(ids) => {
            let mut seen = BTreeSet::new();
            for id in ids {
                if !seen.insert(id) {
                    return Err(Error::InvalidConfig(format!("subject {id} listed twice")));
                }
                if !emb.rows.iter().any(|r| &r.subject_id == id) {
                    return Err(Error::InvalidConfig(format!("subject {id} is not in the embedding")));
                }
            }
            ids.iter().enumerate().map(|(k, id)| LegendEntry { label: id.clone(), color: subject_color(k) }).collect()
        }
    };
    let color_of = |r: &RowMeta| -> Option<&str> {
        match color_by {
            ColorBy::Class => Some(if r.label == Label::Obese { OBESE_COLOR } else { LEAN_COLOR }),
            ColorBy::Subjects(ids) => ids.iter().position(|id| id == &r.subject_id).map(|k| legend[k].color.as_str()),
        }
    };

    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for c in &emb.coords {
        for k in 0..2 {
            lo[k] = lo[k].min(c[k]);
            hi[k] = hi[k].max(c[k]);
        }
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-12);
    let inner = SIZE - 2.0 * MARGIN;
    let px = |c: &[f64; 2]| {
        let x = MARGIN + (c[0] - lo[0]) / span * inner + (span - (hi[0] - lo[0])) / span * inner / 2.0;
        let y = SIZE - MARGIN - (c[1] - lo[1]) / span * inner - (span - (hi[1] - lo[1])) / span * inner / 2.0;
        (x, y)
    };

    let mut svg = String::new();
    let width = SIZE + LEGEND_WIDTH;
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{SIZE}" viewBox="0 0 {width} {SIZE}">"#);
    let _ = writeln!(svg, r#"<rect width="{width}" height="{SIZE}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{}</text>"#, SIZE / 2.0, escape(title));
    let _ = writeln!(svg, r#"<rect x="{MARGIN}" y="{MARGIN}" width="{inner}" height="{inner}" fill="none" stroke="gray"/>"#);

    // Grey background points first so highlighted subjects stay on top.
    let mut background = String::new();
    let mut foreground = String::new();
    for (c, r) in emb.coords.iter().zip(&emb.rows) {
        let (x, y) = px(c);
        match color_of(r) {
            Some(col) => {
                let _ = writeln!(foreground, r#"<circle cx="{x:.2}" cy="{y:.2}" r="3" fill="{col}" fill-opacity="0.8"/>"#);
            }
            None => {
                let _ = writeln!(background, r#"<circle cx="{x:.2}" cy="{y:.2}" r="2" fill="{BACKGROUND_COLOR}"/>"#);
            }
        }
    }
    svg.push_str(&background);
    svg.push_str(&foreground);

    for (k, e) in legend.iter().enumerate() {
        let y = MARGIN + 12.0 + 22.0 * k as f64;
        let _ = writeln!(
            svg,
            r#"<g class="legend-entry"><circle cx="{}" cy="{y}" r="6" fill="{}"/><text x="{}" y="{}" font-family="sans-serif" font-size="13">{}</text></g>"#,
            SIZE + 12.0,
            e.color,
            SIZE + 24.0,
            y + 4.0,
            escape(&e.label)
        );
    }
    svg.push_str("</svg>\n");
    Ok((svg, legend))
}

/// Writes the scatter plot to `out` and returns its legend.
pub fn render_scatter(emb: &Embedding2D, color_by: &ColorBy, title: &str, out: &Path) -> Result<Vec<LegendEntry>> {
    let (svg, legend) = scatter_svg(emb, color_by, title)?;
    atomic_write(out, svg.as_bytes())?;
    Ok(legend)
}

#[derive(Serialize)]
struct CoordinateRow<'a> {
    x: f64,
    y: f64,
    subject: &'a str,
    epoch: usize,
    label: Label,
}

/// Coordinates as CSV with header `x,y,subject,epoch,label`.
pub fn write_coordinates_csv(emb: &Embedding2D, out: &Path) -> Result<()> {
    if emb.is_empty() {
        return Err(Error::Empty("embedding".into()));
    }
    let io_err = |e: csv::Error| Error::Io { path: out.to_path_buf(), reason: e.to_string() };
    let mut w = csv::Writer::from_writer(Vec::new());
    for (c, r) in emb.coords.iter().zip(&emb.rows) {
        w.serialize(CoordinateRow { x: c[0], y: c[1], subject: &r.subject_id, epoch: r.epoch_index, label: r.label }).map_err(io_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io { path: out.to_path_buf(), reason: e.to_string() })?;
    atomic_write(out, &bytes)?;
    Ok(())
}
