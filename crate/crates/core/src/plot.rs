//! Minimal PNG rendering for heatmaps and line curves. Presentation only:
//! every plot is written next to the CSV that holds its numbers.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

/// Lighter means higher: values in `[lo, hi]` map from dark blue to
/// pale yellow.
fn ramp(t: f64) -> Rgb<u8> {
    let t = t.clamp(0.0, 1.0);
    let stops = [(0.0, [20.0, 24.0, 82.0]), (0.5, [33.0, 145.0, 140.0]), (1.0, [253.0, 240.0, 170.0])];
    let (a, b) = if t <= 0.5 { (stops[0], stops[1]) } else { (stops[1], stops[2]) };
    let u = (t - a.0) / (b.0 - a.0);
    let c = |i: usize| (a.1[i] + (b.1[i] - a.1[i]) * u).round() as u8;
    Rgb([c(0), c(1), c(2)])
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::Artifact { path: path.to_path_buf(), msg: e.to_string() })
}

/// Square heatmap, `cell` pixels per matrix entry, values clamped to
/// `[lo, hi]`.
pub fn heatmap_png(matrix: &[Vec<f64>], lo: f64, hi: f64, cell: u32, path: &Path) -> Result<()> {
    let n = matrix.len() as u32;
    if n == 0 || matrix.iter().any(|r| r.len() != matrix.len()) {
        return Err(Error::Eval("heatmap needs a non-empty square matrix".into()));
    }
    let mut img = RgbImage::new(n * cell, n * cell);
    for (i, row) in matrix.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let colour = ramp((v - lo) / (hi - lo).max(1e-12));
            for dy in 0..cell {
                for dx in 0..cell {
                    img.put_pixel(j as u32 * cell + dx, i as u32 * cell + dy, colour);
                }
            }
        }
    }
    save(&img, path)
}

const PALETTE: [[u8; 3]; 6] = [[31, 119, 180], [255, 127, 14], [44, 160, 44], [214, 39, 40], [148, 103, 189], [140, 86, 75]];

fn line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), c: Rgb<u8>) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let (x, y) = (x0 + (x1 - x0) * t, y0 + (y1 - y0) * t);
        for (ox, oy) in [(0, 0), (1, 0), (0, 1)] {
            let (px, py) = (x.round() as i64 + ox, y.round() as i64 + oy);
            if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                img.put_pixel(px as u32, py as u32, c);
            }
        }
    }
}

/// Line chart of `(x, y)` series on shared axes; y spans `[0, y_max]`.
pub fn curves_png(series: &[(String, Vec<(f64, f64)>)], y_max: f64, path: &Path) -> Result<()> {
    let (w, h, m) = (480u32, 320u32, 30.0);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let x_max = series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)).fold(1.0f64, f64::max);
    let sx = |x: f64| m + x / x_max * (w as f64 - 2.0 * m);
    let sy = |y: f64| h as f64 - m - y / y_max.max(1e-9) * (h as f64 - 2.0 * m);
    let axis = Rgb([0, 0, 0]);
    line(&mut img, (m, h as f64 - m), (w as f64 - m, h as f64 - m), axis);
    line(&mut img, (m, m), (m, h as f64 - m), axis);
    for (k, (_, pts)) in series.iter().enumerate() {
        let c = Rgb(PALETTE[k % PALETTE.len()]);
        for pair in pts.windows(2) {
            line(&mut img, (sx(pair[0].0), sy(pair[0].1)), (sx(pair[1].0), sy(pair[1].1)), c);
        }
        for &(x, y) in pts {
            line(&mut img, (sx(x) - 2.0, sy(y)), (sx(x) + 2.0, sy(y)), c);
        }
    }
    save(&img, path)
}
