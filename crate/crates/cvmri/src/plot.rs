//! Minimal PNG curve rendering for the experiment reports.
//!
//! Draws mean curves with a shaded +/- one-standard-deviation band and
//! an optional dashed horizontal baseline onto a fixed-size canvas.
//! Deliberately small: axes, ticks, and a legend strip, nothing more.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

const WIDTH: u32 = 800;
const HEIGHT: u32 = 600;
const MARGIN: u32 = 60;

pub const COLORS: [[u8; 3]; 4] =
    [[31, 119, 180], [255, 127, 14], [44, 160, 44], [214, 39, 40]];

/// One plotted curve: x positions, mean values, and standard
/// deviations (zero-length `std` disables the band).
#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub x: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub color: [u8; 3],
}

impl Series {
    fn validate(&self) -> Result<()> {
        if self.x.len() != self.mean.len() || (!self.std.is_empty() && self.std.len() != self.x.len())
        {
            return Err(Error::invalid(format!(
                "series '{}': {} x, {} mean, {} std",
                self.label,
                self.x.len(),
                self.mean.len(),
                self.std.len()
            )));
        }
        if self.x.is_empty() {
            return Err(Error::invalid(format!("series '{}' is empty", self.label)));
        }
        Ok(())
    }
}

struct Frame {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        let w = (WIDTH - 2 * MARGIN) as f64;
        MARGIN as f64 + (x - self.x_min) / (self.x_max - self.x_min) * w
    }

    fn py(&self, y: f64) -> f64 {
        let h = (HEIGHT - 2 * MARGIN) as f64;
        HEIGHT as f64 - MARGIN as f64 - (y - self.y_min) / (self.y_max - self.y_min) * h
    }
}

fn blend(img: &mut RgbImage, x: i64, y: i64, color: [u8; 3], alpha: f64) {
    if x < 0 || y < 0 || x >= WIDTH as i64 || y >= HEIGHT as i64 {
        return;
    }
    let p = img.get_pixel_mut(x as u32, y as u32);
    for c in 0..3 {
        p.0[c] = (p.0[c] as f64 * (1.0 - alpha) + color[c] as f64 * alpha).round() as u8;
    }
}

fn draw_line(img: &mut RgbImage, x0: f64, y0: f64, x1: f64, y1: f64, color: [u8; 3]) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let x = x0 + t * (x1 - x0);
        let y = y0 + t * (y1 - y0);
        // 2x2 block for a slightly thicker stroke.
        for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
            blend(img, x.round() as i64 + dx, y.round() as i64 + dy, color, 1.0);
        }
    }
}

fn draw_dashed_h(img: &mut RgbImage, y: f64, x0: f64, x1: f64, color: [u8; 3]) {
    let mut x = x0;
    while x < x1 {
        let end = (x + 8.0).min(x1);
        draw_line(img, x, y, end, y, color);
        x += 14.0;
    }
}

/// Renders the curves to a PNG file. Axis limits cover all series
/// (plus bands and the baseline) with a small pad.
pub fn render_curves(
    path: &Path,
    series: &[Series],
    baseline: Option<(f64, f64)>,
) -> Result<()> {
    if series.is_empty() {
        return Err(Error::invalid("no series to plot"));
    }
    for s in series {
        s.validate()?;
    }
    let mut x_min = f64::INFINITY;
    let mut x_max = f64::NEG_INFINITY;
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for s in series {
        for (i, &x) in s.x.iter().enumerate() {
            let sd = if s.std.is_empty() { 0.0 } else { s.std[i] };
            x_min = x_min.min(x);
            x_max = x_max.max(x);
            y_min = y_min.min(s.mean[i] - sd);
            y_max = y_max.max(s.mean[i] + sd);
        }
    }
    if let Some((b, sd)) = baseline {
        y_min = y_min.min(b - sd);
        y_max = y_max.max(b + sd);
    }
    if x_max == x_min {
        x_max = x_min + 1.0;
    }
    let pad = ((y_max - y_min) * 0.1).max(0.01);
    let frame =
        Frame { x_min, x_max, y_min: y_min - pad, y_max: y_max + pad };

    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));

    // Axes.
    let axis = [40u8, 40, 40];
    draw_line(
        &mut img,
        MARGIN as f64,
        (HEIGHT - MARGIN) as f64,
        (WIDTH - MARGIN) as f64,
        (HEIGHT - MARGIN) as f64,
        axis,
    );
    draw_line(&mut img, MARGIN as f64, MARGIN as f64, MARGIN as f64, (HEIGHT - MARGIN) as f64, axis);
    // Tick marks every tenth of each axis range.
    for i in 0..=10 {
        let fx = frame.px(x_min + (x_max - x_min) * i as f64 / 10.0);
        draw_line(&mut img, fx, (HEIGHT - MARGIN) as f64, fx, (HEIGHT - MARGIN + 6) as f64, axis);
        let fy = frame.py(frame.y_min + (frame.y_max - frame.y_min) * i as f64 / 10.0);
        draw_line(&mut img, (MARGIN - 6) as f64, fy, MARGIN as f64, fy, axis);
    }

    // Baseline first so curves draw on top.
    if let Some((b, _)) = baseline {
        draw_dashed_h(&mut img, frame.py(b), frame.px(x_min), frame.px(x_max), [90, 90, 90]);
    }

    for s in series {
        // Shaded band.
        if !s.std.is_empty() {
            for i in 0..s.x.len().saturating_sub(1) {
                let (xa, xb) = (frame.px(s.x[i]), frame.px(s.x[i + 1]));
                for px in xa.round() as i64..=xb.round() as i64 {
                    let t = if xb > xa { (px as f64 - xa) / (xb - xa) } else { 0.0 };
                    let m = s.mean[i] + t * (s.mean[i + 1] - s.mean[i]);
                    let sd = s.std[i] + t * (s.std[i + 1] - s.std[i]);
                    let (ya, yb) = (frame.py(m + sd), frame.py(m - sd));
                    for py in ya.round() as i64..=yb.round() as i64 {
                        blend(&mut img, px, py, s.color, 0.18);
                    }
                }
            }
        }
        // Mean line and point markers.
        for i in 0..s.x.len().saturating_sub(1) {
            draw_line(
                &mut img,
                frame.px(s.x[i]),
                frame.py(s.mean[i]),
                frame.px(s.x[i + 1]),
                frame.py(s.mean[i + 1]),
                s.color,
            );
        }
        for (i, &x) in s.x.iter().enumerate() {
            let (cx, cy) = (frame.px(x), frame.py(s.mean[i]));
            for dx in -2i64..=2 {
                for dy in -2i64..=2 {
                    if dx * dx + dy * dy <= 4 {
                        blend(&mut img, cx.round() as i64 + dx, cy.round() as i64 + dy, s.color, 1.0);
                    }
                }
            }
        }
    }

    // Legend strip: one swatch per series in the top margin.
    for (k, s) in series.iter().enumerate() {
        let y = 18.0 + 14.0 * k as f64;
        draw_line(&mut img, MARGIN as f64, y, MARGIN as f64 + 30.0, y, s.color);
    }

    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
    }
    img.save(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok(())
}
