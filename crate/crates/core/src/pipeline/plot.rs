//! Minimal raster plots for the ablation report.

use image::{Rgb, RgbImage};

use super::AblationReport;
use crate::tensor::Tensor4;

const BAR_COLORS: [[u8; 3]; 3] = [[200, 80, 60], [230, 170, 50], [60, 130, 200]];

fn fill(img: &mut RgbImage, x0: i64, y0: i64, x1: i64, y1: i64, c: [u8; 3]) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    for y in y0.max(0)..y1.min(h) {
        for x in x0.max(0)..x1.min(w) {
            img.put_pixel(x as u32, y as u32, Rgb(c));
        }
    }
}

/// Mean boundary score per strategy with its confidence interval as a
/// whisker, in `Strategy::ALL` order; the y axis starts at zero.
pub fn boundary_chart(r: &AblationReport) -> RgbImage {
    let (w, h, margin) = (360i64, 240i64, 30i64);
    let mut img = RgbImage::from_pixel(w as u32, h as u32, Rgb([255, 255, 255]));
    fill(&mut img, margin, margin, margin + 1, h - margin, [0, 0, 0]);
    fill(&mut img, margin, h - margin, w - margin, h - margin + 1, [0, 0, 0]);
    let top = r
        .strategies
        .iter()
        .map(|s| s.boundary.hi.max(s.boundary.mean))
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let plot_h = (h - 2 * margin) as f64;
    let y_of = |v: f64| h - margin - (v / top * plot_h * 0.9).round() as i64;
    let slot = (w - 2 * margin) / r.strategies.len().max(1) as i64;
    for (i, s) in r.strategies.iter().enumerate() {
        let x0 = margin + i as i64 * slot + slot / 4;
        let x1 = x0 + slot / 2;
        fill(&mut img, x0, y_of(s.boundary.mean), x1, h - margin, BAR_COLORS[i % 3]);
        let xm = (x0 + x1) / 2;
        let (lo, hi) = (y_of(s.boundary.lo), y_of(s.boundary.hi));
        fill(&mut img, xm, hi, xm + 1, lo + 1, [0, 0, 0]);
        fill(&mut img, xm - 6, hi, xm + 7, hi + 1, [0, 0, 0]);
        fill(&mut img, xm - 6, lo, xm + 7, lo + 1, [0, 0, 0]);
    }
    img
}

/// Rows of equally sized RGB tensors, 2 px apart.
pub fn image_grid(rows: &[Vec<&Tensor4>]) -> RgbImage {
    let cell_w = rows.iter().flatten().map(|t| t.width()).max().unwrap_or(1);
    let cell_h = rows.iter().flatten().map(|t| t.height()).max().unwrap_or(1);
    let cols = rows.iter().map(Vec::len).max().unwrap_or(1);
    let gap = 2;
    let w = cols * (cell_w + gap) + gap;
    let h = rows.len().max(1) * (cell_h + gap) + gap;
    let mut img = RgbImage::from_pixel(w as u32, h as u32, Rgb([255, 255, 255]));
    for (ri, row) in rows.iter().enumerate() {
        for (ci, t) in row.iter().enumerate() {
            let (ox, oy) = (gap + ci * (cell_w + gap), gap + ri * (cell_h + gap));
            for y in 0..t.height() {
                for x in 0..t.width() {
                    let px = std::array::from_fn(|c| (t.at(0, c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
                    img.put_pixel((ox + x) as u32, (oy + y) as u32, Rgb(px));
                }
            }
        }
    }
    img
}
