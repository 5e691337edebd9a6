//! Scalp topographic maps for per-channel values.
//!
//! Electrodes sit on the unit-radius head disk, nose up, left hemisphere on the
//! left. The field is a Gaussian radial-basis interpolant with a constant
//! term, which reproduces the electrode values exactly and a constant input
//! everywhere.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use eegvae_core::io::{atomic_write, to_json_bytes};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Projected 10-20 positions: outer ring at radius 0.9, inner ring at 0.45.
pub const ELECTRODE_POSITIONS: [(&str, f64, f64); 19] = [
    ("Fp1", -0.278, 0.856),
    ("Fp2", 0.278, 0.856),
    ("F7", -0.728, 0.529),
    ("F3", -0.350, 0.470),
    ("Fz", 0.0, 0.450),
    ("F4", 0.350, 0.470),
    ("F8", 0.728, 0.529),
    ("T3", -0.900, 0.0),
    ("C3", -0.450, 0.0),
    ("Cz", 0.0, 0.0),
    ("C4", 0.450, 0.0),
    ("T4", 0.900, 0.0),
    ("T5", -0.728, -0.529),
    ("P3", -0.350, -0.470),
    ("Pz", 0.0, -0.450),
    ("P4", 0.350, -0.470),
    ("T6", 0.728, -0.529),
    ("O1", -0.278, -0.856),
    ("O2", 0.278, -0.856),
];

const KERNEL_WIDTH: f64 = 0.22;
const GRID: usize = 80;
const SIZE: f64 = 480.0;

pub fn electrode_position(name: &str) -> Option<(f64, f64)> {
    ELECTRODE_POSITIONS.iter().find(|(n, _, _)| n.eq_ignore_ascii_case(name)).map(|&(_, x, y)| (x, y))
}

fn kernel(dx: f64, dy: f64) -> f64 {
    (-(dx * dx + dy * dy) / (KERNEL_WIDTH * KERNEL_WIDTH)).exp()
}

/// Solves `a · x = b` in place by Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for p in 0..n {
        let pivot = (p..n).max_by(|&i, &j| a[i][p].abs().total_cmp(&a[j][p].abs()))?;
        if a[pivot][p].abs() < 1e-12 {
            return None;
        }
        a.swap(p, pivot);
        b.swap(p, pivot);
        for r in p + 1..n {
            let k = a[r][p] / a[p][p];
            if k != 0.0 {
                for c in p..n {
                    a[r][c] -= k * a[p][c];
                }
                b[r] -= k * b[p];
            }
        }
    }
    let mut x = vec![0.0; n];
    for p in (0..n).rev() {
        let tail: f64 = (p + 1..n).map(|c| a[p][c] * x[c]).sum();
        x[p] = (b[p] - tail) / a[p][p];
    }
    Some(x)
}

#[derive(Debug, Clone)]
pub struct Interpolator {
    sites: Vec<(f64, f64)>,
    weights: Vec<f64>,
    offset: f64,
}

impl Interpolator {
    /// Fits the interpolant to one value per named 10-20 electrode.
    pub fn new(values: &[f64], names: &[String]) -> Result<Interpolator> {
        if values.len() != ELECTRODE_POSITIONS.len() || names.len() != values.len() {
            return Err(Error::InvalidConfig(format!(
                "need {} channel values and names, got {} values and {} names",
                ELECTRODE_POSITIONS.len(),
                values.len(),
                names.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("channel values".into()));
        }
        let mut sites = Vec::with_capacity(names.len());
        for name in names {
            let pos = electrode_position(name).ok_or_else(|| Error::UnknownChannel(name.clone()))?;
            if sites.contains(&pos) {
                return Err(Error::InvalidConfig(format!("channel {name} given twice")));
            }
            sites.push(pos);
        }

        let n = sites.len();
        let mut a = vec![vec![0.0; n + 1]; n + 1];
        for i in 0..n {
            for j in 0..n {
                a[i][j] = kernel(sites[i].0 - sites[j].0, sites[i].1 - sites[j].1);
            }
            a[i][n] = 1.0;
            a[n][i] = 1.0;
        }
        let mut b = values.to_vec();
        b.push(0.0);
        let x = solve(a, b).ok_or_else(|| Error::InvalidConfig("singular interpolation system".into()))?;
        Ok(Interpolator { sites, weights: x[..n].to_vec(), offset: x[n] })
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        self.offset + self.sites.iter().zip(&self.weights).map(|(&(sx, sy), w)| w * kernel(x - sx, y - sy)).sum::<f64>()
    }

    /// Field values on a `size × size` grid over `[-1, 1]²`, row 0 at the top;
    /// cells outside the head circle are `None`.
    pub fn grid(&self, size: usize) -> Vec<Option<f64>> {
        let mut out = Vec::with_capacity(size * size);
        for r in 0..size {
            for c in 0..size {
                let x = -1.0 + (c as f64 + 0.5) * 2.0 / size as f64;
                let y = 1.0 - (r as f64 + 0.5) * 2.0 / size as f64;
                out.push((x * x + y * y <= 1.0).then(|| self.eval(x, y)));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelValue {
    pub channel: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopomapSummary {
    pub title: String,
    pub channels: Vec<ChannelValue>,
    pub field_min: f64,
    pub field_max: f64,
    /// Where the summary was written; not part of the file itself.
    #[serde(skip)]
    pub values_path: PathBuf,
}

/// White to dark red over `t ∈ [0, 1]`.
fn intensity_color(t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    format!("#{:02x}{:02x}{:02x}", lerp(255.0, 153.0), lerp(255.0, 0.0), lerp(255.0, 13.0))
}

/// Writes an SVG topographic map to `out` and the raw channel values as JSON
/// next to it (same stem, `.json` extension).
pub fn render_topomap(values: &[f64], names: &[String], title: &str, out: &Path) -> Result<TopomapSummary> {
    let interp = Interpolator::new(values, names)?;
    let grid = interp.grid(GRID);
    let inside = grid.iter().flatten();
    let field_min = inside.clone().copied().fold(f64::INFINITY, f64::min);
    let field_max = inside.copied().fold(f64::NEG_INFINITY, f64::max);
    let range = field_max - field_min;

    let centre = SIZE / 2.0;
    let radius = SIZE * 0.4;
    let cell = 2.0 * radius / GRID as f64;
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{}" viewBox="0 0 {SIZE} {}">"#, SIZE + 40.0, SIZE + 40.0);
    let _ = writeln!(svg, r#"<rect width="{SIZE}" height="{}" fill="white"/>"#, SIZE + 40.0);
    let _ = writeln!(svg, r#"<text x="{centre}" y="22" font-family="sans-serif" font-size="16" text-anchor="middle">{}</text>"#, title.replace('&', "&amp;").replace('<', "&lt;"));
    let _ = writeln!(svg, r#"<g shape-rendering="crispEdges">"#);
    for (k, v) in grid.iter().enumerate() {
        if let Some(v) = v {
            let t = if range > 1e-12 { (v - field_min) / range } else { 0.5 };
            let x = centre - radius + (k % GRID) as f64 * cell;
            let y = centre - radius + (k / GRID) as f64 * cell;
            let _ = writeln!(svg, r#"<rect x="{x:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#, cell + 0.05, cell + 0.05, intensity_color(t));
        }
    }
    svg.push_str("</g>\n");
    // Head outline, nose and ears.
    let _ = writeln!(svg, r#"<circle cx="{centre}" cy="{centre}" r="{radius}" fill="none" stroke="black" stroke-width="2"/>"#);
    let _ = writeln!(
        svg,
        r#"<polyline points="{:.2},{:.2} {centre},{:.2} {:.2},{:.2}" fill="none" stroke="black" stroke-width="2"/>"#,
        centre - 0.1 * radius,
        centre - 0.995 * radius,
        centre - 1.12 * radius,
        centre + 0.1 * radius,
        centre - 0.995 * radius
    );
    for side in [-1.0, 1.0] {
        let _ = writeln!(
            svg,
            r#"<ellipse cx="{:.2}" cy="{centre}" rx="{:.2}" ry="{:.2}" fill="none" stroke="black" stroke-width="2"/>"#,
            centre + side * 1.04 * radius,
            0.05 * radius,
            0.16 * radius
        );
    }
    for (name, v) in names.iter().zip(values) {
        let (ex, ey) = electrode_position(name).expect("validated above");
        let (x, y) = (centre + ex * radius, centre - ey * radius);
        let _ = writeln!(
            svg,
            r#"<g class="electrode"><circle cx="{x:.2}" cy="{y:.2}" r="3" fill="black"/><text x="{x:.2}" y="{:.2}" font-family="sans-serif" font-size="10" text-anchor="middle">{name}</text><title>{name}: {v:.6}</title></g>"#,
            y - 6.0
        );
    }
    // Colour bar.
    for k in 0..50 {
        let x = centre - 100.0 + 4.0 * k as f64;
        let _ = writeln!(svg, r#"<rect x="{x}" y="{}" width="4.2" height="10" fill="{}"/>"#, SIZE + 8.0, intensity_color(k as f64 / 49.0));
    }
    let _ = writeln!(svg, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="end">{field_min:.3}</text>"#, centre - 104.0, SIZE + 17.0);
    let _ = writeln!(svg, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11">{field_max:.3}</text>"#, centre + 104.0, SIZE + 17.0);
    svg.push_str("</svg>\n");
    atomic_write(out, svg.as_bytes())?;

    let values_path = out.with_extension("json");
    let summary = TopomapSummary {
        title: title.to_string(),
        channels: names.iter().zip(values).map(|(n, &v)| ChannelValue { channel: n.clone(), value: v }).collect(),
        field_min,
        field_max,
        values_path: values_path.clone(),
    };
    atomic_write(&values_path, &to_json_bytes(&summary))?;
    Ok(summary)
}
