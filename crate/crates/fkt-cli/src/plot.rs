//! Minimal PNG charts: line plots for loss/accuracy curves and a grouped bar
//! chart for the regime comparison. Axes and colored geometry only; the file
//! name carries the meaning.

use std::path::Path;

use fkt_core::{FktError, Result};

const WIDTH: usize = 640;
const HEIGHT: usize = 420;
const MARGIN: usize = 48;

pub struct Series {
    pub color: [u8; 3],
    pub values: Vec<f64>,
}

struct Canvas {
    pixels: Vec<u8>,
}

impl Canvas {
    fn new() -> Self {
        Canvas {
            pixels: vec![255u8; WIDTH * HEIGHT * 3],
        }
    }

    fn put(&mut self, x: i64, y: i64, color: [u8; 3]) {
        if x < 0 || y < 0 || x >= WIDTH as i64 || y >= HEIGHT as i64 {
            return;
        }
        let idx = (y as usize * WIDTH + x as usize) * 3;
        self.pixels[idx..idx + 3].copy_from_slice(&color);
    }

    fn line(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, color: [u8; 3]) {
        let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let x = x0 + (x1 - x0) * t;
            let y = y0 + (y1 - y0) * t;
            for dx in -1..=0i64 {
                for dy in -1..=0i64 {
                    self.put(x.round() as i64 + dx, y.round() as i64 + dy, color);
                }
            }
        }
    }

    fn rect(&mut self, x0: usize, y0: usize, x1: usize, y1: usize, color: [u8; 3]) {
        for y in y0..y1 {
            for x in x0..x1 {
                self.put(x as i64, y as i64, color);
            }
        }
    }

    fn axes(&mut self) {
        let black = [0u8; 3];
        self.line(
            MARGIN as f64,
            MARGIN as f64 / 2.0,
            MARGIN as f64,
            (HEIGHT - MARGIN) as f64,
            black,
        );
        self.line(
            MARGIN as f64,
            (HEIGHT - MARGIN) as f64,
            (WIDTH - MARGIN / 2) as f64,
            (HEIGHT - MARGIN) as f64,
            black,
        );
    }

    fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)
                .map_err(|e| FktError::Persistence(format!("{}: {e}", dir.display())))?;
        }
        let img: image::RgbImage =
            image::ImageBuffer::from_raw(WIDTH as u32, HEIGHT as u32, self.pixels.clone())
                .expect("sized buffer");
        img.save(path)
            .map_err(|e| FktError::Persistence(format!("{}: {e}", path.display())))
    }
}

pub const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

/// Polyline chart over a shared x axis (index = position in the series).
pub fn line_chart(path: &Path, series: &[Series]) -> Result<()> {
    let mut canvas = Canvas::new();
    canvas.axes();
    let max_len = series.iter().map(|s| s.values.len()).max().unwrap_or(0);
    if max_len >= 1 {
        let lo = series
            .iter()
            .flat_map(|s| s.values.iter())
            .cloned()
            .fold(f64::INFINITY, f64::min)
            .min(0.0);
        let hi = series
            .iter()
            .flat_map(|s| s.values.iter())
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max)
            .max(lo + 1e-9);
        let plot_w = (WIDTH - MARGIN - MARGIN / 2) as f64;
        let plot_h = (HEIGHT - MARGIN - MARGIN / 2) as f64;
        let x_of = |i: usize| MARGIN as f64 + plot_w * i as f64 / (max_len.max(2) - 1) as f64;
        let y_of =
            |v: f64| (HEIGHT - MARGIN) as f64 - plot_h * (v - lo) / (hi - lo);
        for s in series {
            for pair in s.values.windows(2).enumerate() {
                let (i, w) = pair;
                canvas.line(x_of(i), y_of(w[0]), x_of(i + 1), y_of(w[1]), s.color);
            }
            if s.values.len() == 1 {
                canvas.rect(
                    x_of(0) as usize,
                    y_of(s.values[0]) as usize,
                    x_of(0) as usize + 3,
                    y_of(s.values[0]) as usize + 3,
                    s.color,
                );
            }
        }
        // Legend swatches, top-right.
        for (i, s) in series.iter().enumerate() {
            let y = MARGIN / 2 + i * 14;
            canvas.rect(WIDTH - MARGIN - 20, y, WIDTH - MARGIN - 6, y + 10, s.color);
        }
    }
    canvas.save(path)
}

/// Grouped bars with error whiskers; values in [0, 1].
pub fn bar_chart(path: &Path, bars: &[(f64, f64, [u8; 3])]) -> Result<()> {
    let mut canvas = Canvas::new();
    canvas.axes();
    if !bars.is_empty() {
        let plot_w = WIDTH - MARGIN - MARGIN / 2;
        let plot_h = (HEIGHT - MARGIN - MARGIN / 2) as f64;
        let slot = plot_w / bars.len();
        let bar_w = (slot * 3 / 5).max(4);
        for (i, (value, err, color)) in bars.iter().enumerate() {
            let x0 = MARGIN + i * slot + (slot - bar_w) / 2;
            let top = (HEIGHT - MARGIN) as f64 - plot_h * value.clamp(0.0, 1.0);
            canvas.rect(x0, top as usize, x0 + bar_w, HEIGHT - MARGIN, *color);
            let cx = (x0 + bar_w / 2) as f64;
            let y_lo = (HEIGHT - MARGIN) as f64 - plot_h * (value - err).clamp(0.0, 1.0);
            let y_hi = (HEIGHT - MARGIN) as f64 - plot_h * (value + err).clamp(0.0, 1.0);
            canvas.line(cx, y_lo, cx, y_hi, [0, 0, 0]);
            canvas.line(cx - 4.0, y_lo, cx + 4.0, y_lo, [0, 0, 0]);
            canvas.line(cx - 4.0, y_hi, cx + 4.0, y_hi, [0, 0, 0]);
        }
    }
    canvas.save(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_write_decodable_pngs() {
        let dir = tempfile::tempdir().unwrap();
        let lines = dir.path().join("lines.png");
        line_chart(
            &lines,
            &[
                Series {
                    color: PALETTE[0],
                    values: vec![1.0, 0.7, 0.5, 0.4],
                },
                Series {
                    color: PALETTE[1],
                    values: vec![0.9, 0.8, 0.2],
                },
            ],
        )
        .unwrap();
        let img = image::open(&lines).unwrap();
        assert_eq!(img.width(), 640);

        let bars = dir.path().join("bars.png");
        bar_chart(
            &bars,
            &[(0.92, 0.01, PALETTE[0]), (0.95, 0.02, PALETTE[1])],
        )
        .unwrap();
        assert!(image::open(&bars).is_ok());
    }
}
