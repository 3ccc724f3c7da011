//! Fixed per-patch statistics standing in for a learned backbone.
//!
//! The image is split into a `rows x cols` grid (patch edges at
//! `i * width / cols`), and each patch is summarized by [`FEATURE_NAMES`] in
//! that order. Neighbourhood operators replicate the patch border, so every
//! patch is computed from its own pixels only.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::imgproc::{luma, Image};

pub const FEATURE_DIM: usize = 24;

pub const FEATURE_NAMES: [&str; FEATURE_DIM] = [
    "mean_r",
    "mean_g",
    "mean_b",
    "std_r",
    "std_g",
    "std_b",
    "luma_mean",
    "luma_std",
    "grad_mean",
    "grad_std",
    "laplacian_energy",
    "local_contrast",
    "colorfulness",
    "sat_mean",
    "sat_std",
    "hf_ratio",
    "range_occupancy",
    "luma_min",
    "luma_max",
    "blockiness",
    "impulse_fraction",
    "lap_median_abs",
    "chroma_energy",
    "edge_density",
];

/// Grid pitch used by the blockiness statistic (JPEG-style block size).
const BLOCK: usize = 8;
const EDGE_THRESHOLD: f64 = 0.1;
const IMPULSE_THRESHOLD: f64 = 0.25;
const RANGE_BINS: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct PatchFeatureGrid {
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    /// `rows * cols` vectors of width `dim`, row-major over the grid.
    pub data: Vec<f64>,
}

impl PatchFeatureGrid {
    pub fn new(rows: usize, cols: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols * dim {
            return Err(Error::Shape(format!(
                "{rows}x{cols} grid of width {dim} needs {} values, got {}",
                rows * cols * dim,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite feature".into()));
        }
        Ok(Self {
            rows,
            cols,
            dim,
            data,
        })
    }

    pub fn patches(&self) -> usize {
        self.rows * self.cols
    }

    pub fn patch(&self, p: usize) -> &[f64] {
        &self.data[p * self.dim..(p + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    /// Per-feature mean over patches.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for p in self.iter() {
            for (a, &v) in m.iter_mut().zip(p) {
                *a += v;
            }
        }
        let n = self.patches() as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    /// CSV with a header of feature names and one line per patch
    /// (`row,col,<features>`).
    pub fn to_csv(&self) -> String {
        let mut s = String::from("row,col");
        for name in FEATURE_NAMES.iter().take(self.dim) {
            s.push(',');
            s.push_str(name);
        }
        s.push('\n');
        for (p, v) in self.iter().enumerate() {
            let _ = write!(s, "{},{}", p / self.cols, p % self.cols);
            for x in v {
                let _ = write!(s, ",{x}");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty feature CSV".into()))?;
        let dim = header.split(',').count().saturating_sub(2);
        let mut data = Vec::new();
        let (mut rows, mut cols) = (0, 0);
        for line in lines.filter(|l| !l.is_empty()) {
            let mut fields = line.split(',');
            let mut idx = || -> Result<usize> {
                fields
                    .next()
                    .and_then(|f| f.parse().ok())
                    .ok_or_else(|| Error::Format(format!("bad feature row `{line}`")))
            };
            let (r, c) = (idx()?, idx()?);
            rows = rows.max(r + 1);
            cols = cols.max(c + 1);
            let vals: Vec<f64> = fields
                .map(|f| f.parse().map_err(|_| Error::Format(format!("bad value `{f}`"))))
                .collect::<Result<_>>()?;
            if vals.len() != dim {
                return Err(Error::Format(format!("row has {} values, header {dim}", vals.len())));
            }
            data.extend(vals);
        }
        Self::new(rows, cols, dim, data)
    }
}

pub fn extract_patch_features(img: &Image, grid_rows: usize, grid_cols: usize) -> Result<PatchFeatureGrid> {
    let (w, h) = (img.width(), img.height());
    if grid_rows == 0 || grid_cols == 0 || w < grid_cols || h < grid_rows {
        return Err(Error::ImageTooSmall {
            width: w,
            height: h,
            rows: grid_rows,
            cols: grid_cols,
        });
    }
    let mut data = Vec::with_capacity(grid_rows * grid_cols * FEATURE_DIM);
    for gr in 0..grid_rows {
        let (y0, y1) = (gr * h / grid_rows, (gr + 1) * h / grid_rows);
        for gc in 0..grid_cols {
            let (x0, x1) = (gc * w / grid_cols, (gc + 1) * w / grid_cols);
            data.extend_from_slice(&patch_stats(img, x0, y0, x1 - x0, y1 - y0));
        }
    }
    PatchFeatureGrid::new(grid_rows, grid_cols, FEATURE_DIM, data)
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.max(0.0).sqrt())
}

/// One patch's statistics; `(x0, y0)` is its offset in the full image.
fn patch_stats(img: &Image, x0: usize, y0: usize, pw: usize, ph: usize) -> [f64; FEATURE_DIM] {
    let n = pw * ph;
    let mut chan = [Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n)];
    let mut lum = Vec::with_capacity(n);
    let mut sat = Vec::with_capacity(n);
    let mut rg = Vec::with_capacity(n);
    let mut yb = Vec::with_capacity(n);
    let mut chroma = 0.0;
    for y in y0..y0 + ph {
        for x in x0..x0 + pw {
            let [r, g, b] = img.pixel(x, y);
            let l = f64::from(luma(r, g, b));
            let (r, g, b) = (f64::from(r), f64::from(g), f64::from(b));
            chan[0].push(r);
            chan[1].push(g);
            chan[2].push(b);
            lum.push(l);
            let mx = r.max(g).max(b);
            let mn = r.min(g).min(b);
            sat.push(if mx > 0.0 { (mx - mn) / mx } else { 0.0 });
            rg.push(r - g);
            yb.push(0.5 * (r + g) - b);
            chroma += (r - l).powi(2) + (g - l).powi(2) + (b - l).powi(2);
        }
    }
    let at = |x: isize, y: isize| -> f64 {
        let xc = x.clamp(0, pw as isize - 1) as usize;
        let yc = y.clamp(0, ph as isize - 1) as usize;
        lum[yc * pw + xc]
    };

    let mut grad = Vec::with_capacity(n);
    let mut lap_sq = 0.0;
    let mut lap_abs = Vec::with_capacity(n);
    let mut contrast = 0.0;
    let mut impulses = 0usize;
    let mut edges = 0usize;
    for y in 0..ph as isize {
        for x in 0..pw as isize {
            let c = at(x, y);
            let gx = at(x + 1, y) - c;
            let gy = at(x, y + 1) - c;
            let g = (gx * gx + gy * gy).sqrt();
            grad.push(g);
            if g > EDGE_THRESHOLD {
                edges += 1;
            }
            let lap = at(x - 1, y) + at(x + 1, y) + at(x, y - 1) + at(x, y + 1) - 4.0 * c;
            lap_sq += lap * lap;
            lap_abs.push(lap.abs());
            let mut hood = [0f64; 9];
            let mut k = 0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    hood[k] = at(x + dx, y + dy);
                    k += 1;
                }
            }
            let box_mean = hood.iter().sum::<f64>() / 9.0;
            contrast += (c - box_mean).abs();
            hood.sort_by(f64::total_cmp);
            if (c - hood[4]).abs() > IMPULSE_THRESHOLD {
                impulses += 1;
            }
        }
    }
    lap_abs.sort_by(f64::total_cmp);
    let lap_median = if n % 2 == 1 {
        lap_abs[n / 2]
    } else {
        0.5 * (lap_abs[n / 2 - 1] + lap_abs[n / 2])
    };

    let (mr, sr) = mean_std(&chan[0]);
    let (mg, sg) = mean_std(&chan[1]);
    let (mb, sb) = mean_std(&chan[2]);
    let (ml, sl) = mean_std(&lum);
    let (mgr, sgr) = mean_std(&grad);
    let (ms, ss) = mean_std(&sat);
    let (mrg, srg) = mean_std(&rg);
    let (myb, syb) = mean_std(&yb);
    let colorfulness = (srg * srg + syb * syb).sqrt() + 0.3 * (mrg * mrg + myb * myb).sqrt();

    let mut occupied = [false; RANGE_BINS];
    for &l in &lum {
        occupied[((l * RANGE_BINS as f64) as usize).min(RANGE_BINS - 1)] = true;
    }
    let occupancy = occupied.iter().filter(|&&o| o).count() as f64 / RANGE_BINS as f64;
    let lmin = lum.iter().copied().fold(f64::INFINITY, f64::min);
    let lmax = lum.iter().copied().fold(f64::NEG_INFINITY, f64::max);

    [
        mr,
        mg,
        mb,
        sr,
        sg,
        sb,
        ml,
        sl,
        mgr,
        sgr,
        lap_sq / n as f64,
        contrast / n as f64,
        colorfulness,
        ms,
        ss,
        hf_ratio(&lum, pw, ph),
        occupancy,
        lmin,
        lmax,
        blockiness(&lum, x0, y0, pw, ph),
        impulses as f64 / n as f64,
        lap_median,
        chroma / n as f64,
        edges as f64 / n as f64,
    ]
}

/// Share of non-DC 4x4 DCT energy in coefficients with `u + v >= 3`.
fn hf_ratio(lum: &[f64], pw: usize, ph: usize) -> f64 {
    const B: usize = 4;
    let mut basis = [[0f64; B]; B];
    for (u, row) in basis.iter_mut().enumerate() {
        let a = if u == 0 { (1.0 / B as f64).sqrt() } else { (2.0 / B as f64).sqrt() };
        for (x, v) in row.iter_mut().enumerate() {
            *v = a * ((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI / (2 * B) as f64).cos();
        }
    }
    let (mut hf, mut lf) = (0.0, 0.0);
    for by in (0..ph / B).map(|i| i * B) {
        for bx in (0..pw / B).map(|i| i * B) {
            for u in 0..B {
                for v in 0..B {
                    if u + v == 0 {
                        continue;
                    }
                    let mut c = 0.0;
                    for y in 0..B {
                        for x in 0..B {
                            c += basis[u][y] * basis[v][x] * lum[(by + y) * pw + bx + x];
                        }
                    }
                    if u + v >= 3 {
                        hf += c * c;
                    } else {
                        lf += c * c;
                    }
                }
            }
        }
    }
    if hf + lf > 1e-12 {
        hf / (hf + lf)
    } else {
        0.0
    }
}

/// Mean absolute luma step across the global 8-pixel grid minus the mean
/// step elsewhere, over neighbour pairs inside the patch.
fn blockiness(lum: &[f64], x0: usize, y0: usize, pw: usize, ph: usize) -> f64 {
    let (mut on, mut n_on, mut off, mut n_off) = (0.0, 0usize, 0.0, 0usize);
    let mut add = |boundary: bool, d: f64| {
        if boundary {
            on += d;
            n_on += 1;
        } else {
            off += d;
            n_off += 1;
        }
    };
    for y in 0..ph {
        for x in 0..pw {
            let c = lum[y * pw + x];
            if x + 1 < pw {
                add((x0 + x) % BLOCK == BLOCK - 1, (lum[y * pw + x + 1] - c).abs());
            }
            if y + 1 < ph {
                add((y0 + y) % BLOCK == BLOCK - 1, (lum[(y + 1) * pw + x] - c).abs());
            }
        }
    }
    if n_on == 0 || n_off == 0 {
        return 0.0;
    }
    on / n_on as f64 - off / n_off as f64
}
