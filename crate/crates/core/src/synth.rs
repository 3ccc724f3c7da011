//! Seeded generator of clean test images.
//!
//! Each image layers a two-colour linear gradient, tinted multi-octave value
//! noise, a sinusoidal grating and a handful of filled discs and rectangles
//! with sharp or slightly soft edges.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::imgproc::{save_image, Image};
use crate::rng::{derive_seed, SplitMix64};

fn rand_color(r: &mut SplitMix64) -> [f32; 3] {
    [r.next_f64() as f32, r.next_f64() as f32, r.next_f64() as f32]
}

fn smooth(t: f32) -> f32 {
    t * t * (3.0 - 2.0 * t)
}

struct ValueNoise {
    cells: usize,
    lattice: Vec<f32>,
}

impl ValueNoise {
    fn new(cells: usize, r: &mut SplitMix64) -> Self {
        let n = (cells + 1) * (cells + 1);
        Self {
            cells,
            lattice: (0..n).map(|_| r.next_f64() as f32 * 2.0 - 1.0).collect(),
        }
    }

    /// Value at `(u, v)` in `[0, 1]²`.
    fn at(&self, u: f32, v: f32) -> f32 {
        let c = self.cells as f32;
        let (x, y) = ((u * c).min(c - 1e-4), (v * c).min(c - 1e-4));
        let (xi, yi) = (x as usize, y as usize);
        let (tx, ty) = (smooth(x - xi as f32), smooth(y - yi as f32));
        let s = self.cells + 1;
        let l = |i: usize, j: usize| self.lattice[j * s + i];
        let top = l(xi, yi) * (1.0 - tx) + l(xi + 1, yi) * tx;
        let bot = l(xi, yi + 1) * (1.0 - tx) + l(xi + 1, yi + 1) * tx;
        top * (1.0 - ty) + bot * ty
    }
}

enum Shape {
    Disc { cx: f32, cy: f32, r: f32 },
    Rect { x0: f32, y0: f32, x1: f32, y1: f32 },
}

pub fn synth_image(width: usize, height: usize, seed: u64) -> Image {
    let mut r = SplitMix64::new(derive_seed(seed, 0));
    let (c0, c1) = (rand_color(&mut r), rand_color(&mut r));
    let angle = r.next_f64() as f32 * std::f32::consts::TAU;
    let (ca, sa) = (angle.cos(), angle.sin());

    let octaves: Vec<(ValueNoise, f32)> = (0..4)
        .map(|o| (ValueNoise::new(3 << o, &mut r), 0.5f32.powi(o as i32)))
        .collect();
    let noise_amp = 0.05 + 0.2 * r.next_f64() as f32;
    let tint = rand_color(&mut r);

    let grating_amp = if r.next_f64() < 0.5 { 0.0 } else { 0.04 + 0.1 * r.next_f64() as f32 };
    let g_freq = 2.0 + 14.0 * r.next_f64() as f32;
    let g_angle = r.next_f64() as f32 * std::f32::consts::PI;
    let (gc, gs) = (g_angle.cos(), g_angle.sin());

    let n_shapes = 3 + r.below(6) as usize;
    let shapes: Vec<(Shape, [f32; 3], f32, f32)> = (0..n_shapes)
        .map(|_| {
            let shape = if r.next_f64() < 0.5 {
                Shape::Disc {
                    cx: r.next_f64() as f32,
                    cy: r.next_f64() as f32,
                    r: 0.05 + 0.2 * r.next_f64() as f32,
                }
            } else {
                let (x, y) = (r.next_f64() as f32, r.next_f64() as f32);
                let (w, h) = (0.05 + 0.35 * r.next_f64() as f32, 0.05 + 0.35 * r.next_f64() as f32);
                Shape::Rect {
                    x0: x - w / 2.0,
                    y0: y - h / 2.0,
                    x1: x + w / 2.0,
                    y1: y + h / 2.0,
                }
            };
            let opacity = 0.5 + 0.5 * r.next_f64() as f32;
            // edge softness in units of the image's short side
            let soft = if r.next_f64() < 0.6 { 1e-4 } else { 0.01 * r.next_f64() as f32 };
            (shape, rand_color(&mut r), opacity, soft)
        })
        .collect();

    let short = width.min(height) as f32;
    Image::from_fn(width, height, |x, y| {
        let u = (x as f32 + 0.5) / width as f32;
        let v = (y as f32 + 0.5) / height as f32;
        let t = (((u - 0.5) * ca + (v - 0.5) * sa) + 0.75).clamp(0.0, 1.5) / 1.5;
        let mut px = [0f32; 3];
        for c in 0..3 {
            px[c] = c0[c] * (1.0 - t) + c1[c] * t;
        }
        let n: f32 = octaves.iter().map(|(o, a)| a * o.at(u, v)).sum::<f32>() * noise_amp;
        let g = grating_amp * (std::f32::consts::TAU * g_freq * (u * gc + v * gs)).sin();
        for c in 0..3 {
            px[c] += n * (0.5 + tint[c]) + g;
        }
        let (xs, ys) = (x as f32 / short, y as f32 / short);
        for (shape, col, opacity, soft) in &shapes {
            // signed distance, negative inside, in short-side units
            let sd = match *shape {
                Shape::Disc { cx, cy, r } => {
                    let (dx, dy) = (xs - cx * width as f32 / short, ys - cy * height as f32 / short);
                    (dx * dx + dy * dy).sqrt() - r
                }
                Shape::Rect { x0, y0, x1, y1 } => {
                    let (ax, bx) = (x0 * width as f32 / short, x1 * width as f32 / short);
                    let (ay, by) = (y0 * height as f32 / short, y1 * height as f32 / short);
                    (ax - xs).max(xs - bx).max(ay - ys).max(ys - by)
                }
            };
            let alpha = opacity * (0.5 - sd / (2.0 * soft)).clamp(0.0, 1.0);
            for c in 0..3 {
                px[c] = px[c] * (1.0 - alpha) + col[c] * alpha;
            }
        }
        px.map(|c| c.clamp(0.0, 1.0))
    })
}

/// Writes `count` PNG images named `synth_000.png`, ... into `dir`.
pub fn write_corpus(dir: &Path, count: usize, size: usize, seed: u64) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    (0..count)
        .map(|i| {
            let path = dir.join(format!("synth_{i:03}.png"));
            save_image(&synth_image(size, size, derive_seed(seed, i as u64)), &path)?;
            Ok(path)
        })
        .collect()
}
