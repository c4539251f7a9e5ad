//! Deterministic SVG scatter plots.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

const SIZE: f64 = 640.0;
const MARGIN: f64 = 40.0;
pub const PALETTE_LEN: usize = 50;

/// Fixed 50-colour cycle: golden-angle hues over three lightness bands.
pub fn palette() -> Vec<String> {
    (0..PALETTE_LEN)
        .map(|i| {
            let hue = (i as f64 * 137.507_764) % 360.0;
            let light = [0.45, 0.60, 0.35][i % 3];
            let sat = [0.75, 0.60, 0.85][i % 3];
            let [r, g, b] = hsl_to_rgb(hue, sat, light);
            format!("#{r:02x}{g:02x}{b:02x}")
        })
        .collect()
}

fn hsl_to_rgb(h: f64, s: f64, l: f64) -> [u8; 3] {
    let c = (1.0 - (2.0 * l - 1.0).abs()) * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = l - c / 2.0;
    [r, g, b].map(|v| ((v + m) * 255.0).round().clamp(0.0, 255.0) as u8)
}

pub fn render_svg(points: &[[f64; 2]], labels: &[usize]) -> Result<String> {
    if points.len() != labels.len() {
        return Err(Error::dim("figure", format!("{} points vs {} labels", points.len(), labels.len())));
    }
    let colors = palette();
    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    )
    .unwrap();
    writeln!(svg, r##"<rect width="{SIZE}" height="{SIZE}" fill="#ffffff"/>"##).unwrap();
    let (lo, hi) = (MARGIN, SIZE - MARGIN);
    writeln!(svg, r##"<line x1="{lo}" y1="{hi}" x2="{hi}" y2="{hi}" stroke="#000000"/>"##).unwrap();
    writeln!(svg, r##"<line x1="{lo}" y1="{lo}" x2="{lo}" y2="{hi}" stroke="#000000"/>"##).unwrap();

    if !points.is_empty() {
        let bounds = |axis: usize| {
            let min = points.iter().map(|p| p[axis]).fold(f64::INFINITY, f64::min);
            let max = points.iter().map(|p| p[axis]).fold(f64::NEG_INFINITY, f64::max);
            (min, if max > min { max - min } else { 1.0 })
        };
        let ((x0, xr), (y0, yr)) = (bounds(0), bounds(1));
        let span = hi - lo - 10.0;
        for (p, &label) in points.iter().zip(labels) {
            let cx = lo + 5.0 + (p[0] - x0) / xr * span;
            let cy = hi - 5.0 - (p[1] - y0) / yr * span;
            writeln!(
                svg,
                r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="3" fill="{}"/>"#,
                colors[label % PALETTE_LEN]
            )
            .unwrap();
        }
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

pub fn emit_figure(points: &[[f64; 2]], labels: &[usize], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let svg = render_svg(points, labels)?;
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}
