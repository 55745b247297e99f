//! Minimal PNG plots: scatter, line and image grids.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};

pub struct Canvas {
    width: usize,
    height: usize,
    rgb: Vec<u8>,
}

const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [23, 190, 207],
];

pub fn class_color(c: usize) -> [u8; 3] {
    PALETTE[c % PALETTE.len()]
}

impl Canvas {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            rgb: vec![255; width * height * 3],
        }
    }

    pub fn put(&mut self, x: i64, y: i64, color: [u8; 3]) {
        if x < 0 || y < 0 || x as usize >= self.width || y as usize >= self.height {
            return;
        }
        let i = (y as usize * self.width + x as usize) * 3;
        self.rgb[i..i + 3].copy_from_slice(&color);
    }

    pub fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: [u8; 3]) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.put(x, y, color);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(f), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let png_err = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
        let mut w = enc.write_header().map_err(png_err)?;
        w.write_image_data(&self.rgb).map_err(png_err)?;
        w.finish().map_err(png_err)
    }
}

/// Scatter plot of 2-D points over a fixed square window.
pub fn scatter_png(path: &Path, points: &[[f64; 2]], classes: Option<&[usize]>, half_width: f64) -> Result<()> {
    let size = 400;
    let mut c = Canvas::new(size, size);
    let to_px = |v: f64| ((v + half_width) / (2.0 * half_width) * (size - 1) as f64).round() as i64;
    for (i, p) in points.iter().enumerate() {
        let color = classes.map_or([0, 0, 0], |cl| class_color(cl[i]));
        let (x, y) = (to_px(p[0]), size as i64 - 1 - to_px(p[1]));
        for (ox, oy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
            c.put(x + ox, y + oy, color);
        }
    }
    c.save(path)
}

/// Line plot of `(x, y)` series with axes from the data range.
pub fn line_png(path: &Path, series: &[Vec<(f64, f64)>]) -> Result<()> {
    let (w, h, pad) = (480usize, 320usize, 20i64);
    let pts = series.iter().flatten();
    let (mut x_lo, mut x_hi, mut y_lo, mut y_hi) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x_lo = x_lo.min(x);
        x_hi = x_hi.max(x);
        y_lo = y_lo.min(y);
        y_hi = y_hi.max(y);
    }
    if !x_lo.is_finite() || !y_hi.is_finite() {
        return Err(Error::InvalidArgument("nothing to plot".into()));
    }
    let span = |lo: f64, hi: f64| if hi > lo { hi - lo } else { 1.0 };
    let (xs, ys) = (span(x_lo, x_hi), span(y_lo, y_hi));
    let mut c = Canvas::new(w, h);
    let px = |x: f64, y: f64| {
        (
            pad + ((x - x_lo) / xs * (w as i64 - 2 * pad) as f64).round() as i64,
            h as i64 - pad - ((y - y_lo) / ys * (h as i64 - 2 * pad) as f64).round() as i64,
        )
    };
    let grey = [160, 160, 160];
    c.line(px(x_lo, y_lo), px(x_hi, y_lo), grey);
    c.line(px(x_lo, y_lo), px(x_lo, y_hi), grey);
    for (si, s) in series.iter().enumerate() {
        for pair in s.windows(2) {
            c.line(px(pair[0].0, pair[0].1), px(pair[1].0, pair[1].1), class_color(si));
        }
    }
    c.save(path)
}

/// Grid of single-channel images with values mapped from `[-1, 1]`.
pub fn image_grid_png(path: &Path, images: &[f32], side: usize, cols: usize) -> Result<()> {
    let n = images.len() / (side * side);
    let rows = n.div_ceil(cols.max(1)).max(1);
    let scale = 4;
    let cell = side * scale + 2;
    let mut c = Canvas::new(cols * cell, rows * cell);
    for k in 0..n {
        let (gr, gc) = (k / cols, k % cols);
        for i in 0..side * scale {
            for j in 0..side * scale {
                let v = images[k * side * side + (i / scale) * side + j / scale];
                let g = (((v + 1.0) * 0.5).clamp(0.0, 1.0) * 255.0) as u8;
                c.put((gc * cell + 1 + j) as i64, (gr * cell + 1 + i) as i64, [g, g, g]);
            }
        }
    }
    c.save(path)
}
