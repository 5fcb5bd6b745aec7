//! Minimal PNG plotting: line charts and bar charts on a white canvas with
//! black axes. Series/bar identities and axis ranges go into the JSON
//! legend returned to the caller; the images carry no text.

use std::path::Path;

use image::{Rgb, RgbImage};
use serde::Serialize;

use crate::{CliError, CliResult};

const WIDTH: u32 = 800;
const HEIGHT: u32 = 480;
const MARGIN: u32 = 40;

const PALETTE: [[u8; 3]; 10] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
    [188, 189, 34],
    [23, 190, 207],
];

#[derive(Debug, Clone, Serialize)]
pub struct LegendEntry {
    pub name: String,
    pub color: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x_range: Option<(f64, f64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub y_range: Option<(f64, f64)>,
}

fn color(i: usize) -> Rgb<u8> {
    Rgb(PALETTE[i % PALETTE.len()])
}

fn hex(c: Rgb<u8>) -> String {
    format!("#{:02x}{:02x}{:02x}", c.0[0], c.0[1], c.0[2])
}

fn blank() -> RgbImage {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    // axes
    for x in MARGIN..WIDTH - MARGIN {
        img.put_pixel(x, HEIGHT - MARGIN, Rgb([0, 0, 0]));
    }
    for y in MARGIN..=HEIGHT - MARGIN {
        img.put_pixel(MARGIN, y, Rgb([0, 0, 0]));
    }
    img
}

fn draw_line(img: &mut RgbImage, a: (f32, f32), b: (f32, f32), c: Rgb<u8>) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f32 / steps as f32;
        let x = a.0 + (b.0 - a.0) * t;
        let y = a.1 + (b.1 - a.1) * t;
        if x >= 0.0 && y >= 0.0 && (x as u32) < WIDTH && (y as u32) < HEIGHT {
            img.put_pixel(x as u32, y as u32, c);
        }
    }
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        (0.0, 1.0)
    } else if (hi - lo).abs() < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// Multi-series line chart. Returns one legend entry per series with the
/// shared axis ranges.
pub fn line_chart(series: &[(String, Vec<(f64, f64)>)], path: &Path) -> CliResult<Vec<LegendEntry>> {
    let mut img = blank();
    let (x_lo, x_hi) = bounds(series.iter().flat_map(|(_, pts)| pts.iter().map(|p| p.0)));
    let (y_lo, y_hi) = bounds(series.iter().flat_map(|(_, pts)| pts.iter().map(|p| p.1)));
    let plot_w = (WIDTH - 2 * MARGIN) as f64;
    let plot_h = (HEIGHT - 2 * MARGIN) as f64;
    let to_px = |x: f64, y: f64| -> (f32, f32) {
        let px = MARGIN as f64 + (x - x_lo) / (x_hi - x_lo) * plot_w;
        let py = (HEIGHT - MARGIN) as f64 - (y - y_lo) / (y_hi - y_lo) * plot_h;
        (px as f32, py as f32)
    };
    let mut legend = Vec::new();
    for (i, (name, pts)) in series.iter().enumerate() {
        let c = color(i);
        for pair in pts.windows(2) {
            draw_line(&mut img, to_px(pair[0].0, pair[0].1), to_px(pair[1].0, pair[1].1), c);
        }
        legend.push(LegendEntry {
            name: name.clone(),
            color: hex(c),
            x_range: Some((x_lo, x_hi)),
            y_range: Some((y_lo, y_hi)),
        });
    }
    img.save(path)
        .map_err(|e| CliError::runtime(format!("write '{}': {e}", path.display())))?;
    Ok(legend)
}

/// Bar chart over `[0, max]`. Returns one legend entry per bar, in drawing
/// order (left to right).
pub fn bar_chart(bars: &[(String, f64)], path: &Path) -> CliResult<Vec<LegendEntry>> {
    let mut img = blank();
    let y_hi = bars.iter().map(|(_, v)| *v).fold(1e-9f64, f64::max);
    let plot_w = (WIDTH - 2 * MARGIN) as f64;
    let plot_h = (HEIGHT - 2 * MARGIN) as f64;
    let n = bars.len().max(1) as f64;
    let slot = plot_w / n;
    let bar_w = (slot * 0.7).max(1.0);
    let mut legend = Vec::new();
    for (i, (name, value)) in bars.iter().enumerate() {
        let c = color(i);
        let x0 = MARGIN as f64 + i as f64 * slot + (slot - bar_w) / 2.0;
        let h = (value / y_hi).clamp(0.0, 1.0) * plot_h;
        let y0 = (HEIGHT - MARGIN) as f64 - h;
        for x in x0 as u32..(x0 + bar_w) as u32 {
            for y in y0 as u32..(HEIGHT - MARGIN) {
                if x < WIDTH && y < HEIGHT {
                    img.put_pixel(x, y, c);
                }
            }
        }
        legend.push(LegendEntry {
            name: name.clone(),
            color: hex(c),
            x_range: None,
            y_range: Some((0.0, y_hi)),
        });
    }
    img.save(path)
        .map_err(|e| CliError::runtime(format!("write '{}': {e}", path.display())))?;
    Ok(legend)
}
