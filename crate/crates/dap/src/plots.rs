//! Static PNG figures, each paired with a CSV of the plotted numbers.

use std::path::Path;

use dap_core::synth::Mask;

use crate::error::{AppError, AppResult};
use crate::fsutil;

/// RGB8 raster.
pub struct Canvas {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Canvas {
    pub fn new(width: usize, height: usize, fill: [u8; 3]) -> Self {
        Self { width, height, rgb: fill.repeat(width * height) }
    }

    pub fn put(&mut self, x: usize, y: usize, c: [u8; 3]) {
        if x < self.width && y < self.height {
            let i = 3 * (y * self.width + x);
            self.rgb[i..i + 3].copy_from_slice(&c);
        }
    }

    pub fn fill_rect(&mut self, x0: usize, y0: usize, x1: usize, y1: usize, c: [u8; 3]) {
        for y in y0..y1.min(self.height) {
            for x in x0..x1.min(self.width) {
                self.put(x, y, c);
            }
        }
    }

    /// Nearest-neighbour enlargement by an integer factor.
    pub fn scaled(&self, k: usize) -> Canvas {
        let mut out = Canvas::new(self.width * k, self.height * k, [0, 0, 0]);
        for y in 0..out.height {
            for x in 0..out.width {
                let i = 3 * ((y / k) * self.width + x / k);
                out.put(x, y, [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]);
            }
        }
        out
    }

    pub fn encode_png(&self) -> AppResult<Vec<u8>> {
        let mut buf = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut buf, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header()?;
            w.write_image_data(&self.rgb)?;
        }
        Ok(buf)
    }

    pub fn save_png(&self, path: &Path) -> AppResult<()> {
        fsutil::write_atomic(path, &self.encode_png()?)
    }
}

/// Black → red → yellow → white.
pub fn heat(t: f64) -> [u8; 3] {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let ch = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    [ch(3.0 * t), ch(3.0 * t - 1.0), ch(3.0 * t - 2.0)]
}

fn min_max(values: &[f64]) -> (f64, f64) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

/// Row-major `values` rendered with the heat colormap after min-max scaling.
pub fn heatmap(values: &[f64], width: usize, height: usize) -> Canvas {
    let (lo, hi) = min_max(values);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut c = Canvas::new(width, height, [0, 0, 0]);
    for y in 0..height {
        for x in 0..width {
            c.put(x, y, heat((values[y * width + x] - lo) / span));
        }
    }
    c
}

/// Grayscale image blended with a heatmap, ground-truth boundary in green.
pub fn overlay(gray: &[f32], map: &[f64], gt: &Mask, alpha: f64) -> Canvas {
    let (w, h) = (gt.width, gt.height);
    let (lo, hi) = min_max(map);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut c = Canvas::new(w, h, [0, 0, 0]);
    for y in 0..h {
        for x in 0..w {
            let g = gray[y * w + x].clamp(0.0, 1.0) as f64 * 255.0;
            let m = heat((map[y * w + x] - lo) / span);
            let px = [0, 1, 2].map(|k| ((1.0 - alpha) * g + alpha * m[k] as f64).round() as u8);
            c.put(x, y, px);
        }
    }
    for y in 0..h {
        for x in 0..w {
            if !gt.get(y, x) {
                continue;
            }
            let edge = x == 0 || y == 0 || x + 1 == w || y + 1 == h
                || !gt.get(y - 1, x) || !gt.get(y + 1, x) || !gt.get(y, x - 1) || !gt.get(y, x + 1);
            if edge {
                c.put(x, y, [0, 255, 0]);
            }
        }
    }
    c
}

/// Counts of `values` in `bins` equal-width bins over `[lo, hi]`.
pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<usize> {
    let mut counts = vec![0; bins];
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    for &v in values.iter().filter(|v| v.is_finite()) {
        let b = (((v - lo) / span) * bins as f64).floor();
        counts[(b.max(0.0) as usize).min(bins - 1)] += 1;
    }
    counts
}

pub const SERIES: [[u8; 3]; 4] = [[31, 119, 180], [255, 127, 14], [44, 160, 44], [214, 39, 40]];

/// Grouped bars: `series[s][i]` is the height of bar `i` in series `s`.
/// Negative values hang below a zero line.
pub fn bar_chart(series: &[Vec<f64>], bar_px: usize, plot_h: usize) -> Canvas {
    let groups = series.iter().map(Vec::len).max().unwrap_or(0);
    let ns = series.len().max(1);
    let width = groups * (ns * bar_px + bar_px) + bar_px;
    let all: Vec<f64> = series.iter().flatten().copied().filter(|v| v.is_finite()).collect();
    let top = all.iter().copied().fold(0.0, f64::max);
    let bottom = all.iter().copied().fold(0.0, f64::min);
    let span = if top > bottom { top - bottom } else { 1.0 };
    let pad = 4;
    let mut c = Canvas::new(width.max(1), plot_h + 2 * pad, [255, 255, 255]);
    let y_of = |v: f64| pad + ((top - v) / span * plot_h as f64).round() as usize;
    let zero = y_of(0.0);
    for (s, vals) in series.iter().enumerate() {
        let color = SERIES[s % SERIES.len()];
        for (i, &v) in vals.iter().enumerate() {
            if !v.is_finite() {
                continue;
            }
            let x0 = bar_px + i * (ns * bar_px + bar_px) + s * bar_px;
            let y = y_of(v);
            let (a, b) = if y <= zero { (y, zero) } else { (zero, y) };
            c.fill_rect(x0, a, x0 + bar_px, b.max(a + 1), color);
        }
    }
    c.fill_rect(0, zero, c.width, zero + 1, [0, 0, 0]);
    c
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> AppResult<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let to_err = |e: csv::Error| AppError::Format(format!("csv: {e}"));
    w.write_record(header).map_err(to_err)?;
    for r in rows {
        w.write_record(r).map_err(to_err)?;
    }
    let bytes = w.into_inner().map_err(|e| AppError::Format(format!("csv: {e}")))?;
    fsutil::write_atomic(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_edges() {
        assert_eq!(histogram(&[0.0, 0.49, 0.5, 1.0, 2.0, -1.0], 0.0, 1.0, 2), vec![3, 3]);
    }

    #[test]
    fn heat_endpoints() {
        assert_eq!(heat(0.0), [0, 0, 0]);
        assert_eq!(heat(1.0), [255, 255, 255]);
        assert_eq!(heat(f64::NAN), [0, 0, 0]);
    }

    #[test]
    fn png_signature() {
        let c = bar_chart(&[vec![1.0, -0.5], vec![0.25, 0.0]], 3, 20);
        let png = c.encode_png().unwrap();
        assert_eq!(&png[..8], b"\x89PNG\r\n\x1a\n");
    }
}
