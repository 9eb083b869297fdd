//! Montage rendering: one grayscale PNG with three rows of evenly spaced
//! planes, one row per anatomical axis (axial, then sagittal, then
//! coronal). Tile selection depends only on the volume shape and the
//! requested tile count, so repeated renders are identical.

use std::path::Path;

use anyhow::{Context, Result};
use image::GrayImage;
use ndarray::Array3;

pub const DEFAULT_TILES: usize = 6;

/// Pixel gap between tiles and between rows.
const GUTTER: u32 = 2;

/// Indices of `n` evenly spaced planes out of `len` (first and last
/// always included for `n > 1`).
pub fn tile_indices(len: usize, n: usize) -> Vec<usize> {
    assert!(len > 0 && n > 0);
    if n == 1 {
        return vec![len / 2];
    }
    (0..n).map(|k| (k * (len - 1) + (n - 1) / 2) / (n - 1)).collect()
}

fn gray(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Render the montage grid; the tile count per row is `tiles` clamped to
/// the smallest volume dimension so every row holds the same number.
pub fn render(data: &Array3<f32>, tiles: usize) -> GrayImage {
    let (d, h, w) = data.dim();
    let n = tiles.clamp(1, d.min(h).min(w));
    // per-row tile shapes: axial (h x w), sagittal (d x h), coronal (d x w)
    let rows: [(usize, (usize, usize)); 3] = [(d, (h, w)), (w, (d, h)), (h, (d, w))];
    let row_w = |tw: usize| (n * tw + (n - 1) * GUTTER as usize) as u32;
    let canvas_w = rows.iter().map(|&(_, (_, tw))| row_w(tw)).max().expect("three rows");
    let canvas_h = rows.iter().map(|&(_, (th, _))| th as u32).sum::<u32>() + 2 * GUTTER;
    let mut img = GrayImage::new(canvas_w, canvas_h);

    let mut y0 = 0u32;
    for (axis, &(len, (th, tw))) in rows.iter().enumerate() {
        for (t, &plane) in tile_indices(len, n).iter().enumerate() {
            let x0 = t as u32 * (tw as u32 + GUTTER);
            for r in 0..th {
                for c in 0..tw {
                    let v = match axis {
                        0 => data[[plane, r, c]],
                        1 => data[[r, c, plane]],
                        _ => data[[r, plane, c]],
                    };
                    img.put_pixel(x0 + c as u32, y0 + r as u32, image::Luma([gray(v)]));
                }
            }
        }
        y0 += th as u32 + GUTTER;
    }
    img
}

/// Render and save as PNG.
pub fn write_montage(data: &Array3<f32>, tiles: usize, out: &Path) -> Result<()> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    render(data, tiles)
        .save(out)
        .with_context(|| format!("cannot write montage {}", out.display()))
}
