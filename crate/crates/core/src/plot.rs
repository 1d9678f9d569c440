//! Minimal raster plots: a precision-recall curve and an ablation bar chart.
//! Both use a unit square for data coordinates and carry no text.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::Result;
use crate::eval::AblationRow;

const SIZE: u32 = 320;
const MARGIN: u32 = 24;
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);
const LINE: Rgb<u8> = Rgb([30, 90, 200]);
const BAR: Rgb<u8> = Rgb([70, 140, 90]);
const FAILED: Rgb<u8> = Rgb([200, 60, 50]);

struct Canvas {
    img: RgbImage,
}

impl Canvas {
    fn new() -> Self {
        let mut c = Canvas { img: RgbImage::from_pixel(SIZE, SIZE, Rgb([255, 255, 255])) };
        for i in 1..10 {
            let v = i as f64 / 10.0;
            c.line((0.0, v), (1.0, v), GRID);
            c.line((v, 0.0), (v, 1.0), GRID);
        }
        c.line((0.0, 0.0), (1.0, 0.0), AXIS);
        c.line((0.0, 0.0), (0.0, 1.0), AXIS);
        c
    }

    fn to_px(&self, (x, y): (f64, f64)) -> (f64, f64) {
        let span = (SIZE - 2 * MARGIN) as f64;
        (MARGIN as f64 + x.clamp(0.0, 1.0) * span, (SIZE - MARGIN) as f64 - y.clamp(0.0, 1.0) * span)
    }

    fn put(&mut self, x: f64, y: f64, color: Rgb<u8>) {
        let (x, y) = (x.round(), y.round());
        if x >= 0.0 && y >= 0.0 && (x as u32) < SIZE && (y as u32) < SIZE {
            self.img.put_pixel(x as u32, y as u32, color);
        }
    }

    fn line(&mut self, a: (f64, f64), b: (f64, f64), color: Rgb<u8>) {
        let (p, q) = (self.to_px(a), self.to_px(b));
        let steps = (q.0 - p.0).abs().max((q.1 - p.1).abs()).ceil().max(1.0) as usize;
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            self.put(p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1), color);
        }
    }

    fn rect(&mut self, x0: f64, x1: f64, height: f64, color: Rgb<u8>) {
        let (a, b) = (self.to_px((x0, 0.0)), self.to_px((x1, height)));
        for y in b.1.round() as i64..=a.1.round() as i64 {
            for x in a.0.round() as i64..=b.0.round() as i64 {
                self.put(x as f64, y as f64, color);
            }
        }
    }
}

/// Step plot of precision against recall.
pub fn pr_curve_png(path: &Path, curve: &[(f64, f64)]) -> Result<()> {
    let mut c = Canvas::new();
    let mut prev = (0.0, curve.first().map_or(0.0, |p| p.1));
    for &(r, p) in curve {
        c.line(prev, (r, prev.1), LINE);
        c.line((r, prev.1), (r, p), LINE);
        prev = (r, p);
    }
    c.img.save(path)?;
    Ok(())
}

/// One bar per ablation row in table order; failed rows are drawn as a red stub.
pub fn ablation_png(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut c = Canvas::new();
    let n = rows.len().max(1) as f64;
    for (i, row) in rows.iter().enumerate() {
        let (x0, x1) = ((i as f64 + 0.15) / n, (i as f64 + 0.85) / n);
        match row.map_mean_sd() {
            Some((m, _)) => c.rect(x0, x1, m, BAR),
            None => c.rect(x0, x1, 0.02, FAILED),
        }
    }
    c.img.save(path)?;
    Ok(())
}
