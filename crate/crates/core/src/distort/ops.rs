//! Distortion kernels. Each takes already-interpolated parameters.

use crate::imgproc::{luma, Image, CHANNELS};
use crate::rng::SplitMix64;

use super::registry::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Identity,
    BrightnessRaise,
    BrightnessLower,
    GaussianBlur,
    MotionBlur,
    Pixelate,
    JitterWarp,
    SaturationShift,
    ColorQuantization,
    JpegLike,
    ColorSubsampling,
    GaussianNoise,
    ImpulseNoise,
    ContrastReduce,
    OverSharpen,
}

impl Op {
    pub fn parse(name: &str) -> Option<Op> {
        Some(match name {
            "identity" => Op::Identity,
            "brightness-raise" => Op::BrightnessRaise,
            "brightness-lower" => Op::BrightnessLower,
            "gaussian-blur" => Op::GaussianBlur,
            "motion-blur" => Op::MotionBlur,
            "pixelate" => Op::Pixelate,
            "jitter-warp" => Op::JitterWarp,
            "saturation-shift" => Op::SaturationShift,
            "color-quantization" => Op::ColorQuantization,
            "jpeg-like" => Op::JpegLike,
            "color-subsampling" => Op::ColorSubsampling,
            "gaussian-noise" => Op::GaussianNoise,
            "impulse-noise" => Op::ImpulseNoise,
            "contrast-reduce" => Op::ContrastReduce,
            "over-sharpen" => Op::OverSharpen,
            _ => return None,
        })
    }

    /// Parameter names the kernel reads.
    pub fn param_names(self) -> &'static [&'static str] {
        match self {
            Op::Identity => &[],
            Op::BrightnessRaise | Op::BrightnessLower => &["offset"],
            Op::GaussianBlur | Op::GaussianNoise => &["sigma"],
            Op::MotionBlur => &["length"],
            Op::Pixelate => &["block"],
            Op::JitterWarp | Op::SaturationShift | Op::ContrastReduce => &["amount"],
            Op::ColorQuantization => &["levels"],
            Op::JpegLike => &["quality"],
            Op::ColorSubsampling => &["factor"],
            Op::ImpulseNoise => &["prob"],
            Op::OverSharpen => &["amount", "sigma"],
        }
    }

    pub fn apply(self, img: &Image, p: &ParamSet, rng: &mut SplitMix64) -> Image {
        let v = |name: &str| p.get(name).unwrap_or(0.0) as f32;
        match self {
            Op::Identity => img.clone(),
            Op::BrightnessRaise => {
                let o = v("offset");
                img.map_pixels(|px| px.map(|x| x + o * (1.0 - x)))
            }
            Op::BrightnessLower => {
                let o = v("offset");
                img.map_pixels(|px| px.map(|x| x * (1.0 - o)))
            }
            Op::GaussianBlur => gaussian_blur(img, v("sigma")),
            Op::MotionBlur => motion_blur(img, v("length")),
            Op::Pixelate => pixelate(img, v("block")),
            Op::JitterWarp => jitter(img, v("amount"), rng),
            Op::SaturationShift => {
                let keep = 1.0 - v("amount");
                img.map_pixels(|[r, g, b]| {
                    let y = luma(r, g, b);
                    [r, g, b].map(|c| y + keep * (c - y))
                })
            }
            Op::ColorQuantization => {
                let n = (v("levels").round().max(2.0)) - 1.0;
                img.map_pixels(|px| px.map(|c| (c * n).round() / n))
            }
            Op::JpegLike => jpeg_like(img, v("quality").round().clamp(1.0, 100.0) as u32),
            Op::ColorSubsampling => chroma_subsample(img, v("factor").round().max(1.0) as usize),
            Op::GaussianNoise => {
                let s = f64::from(v("sigma"));
                let data = img
                    .data()
                    .iter()
                    .map(|&x| x + (s * rng.normal()) as f32)
                    .collect();
                Image::from_vec(img.width(), img.height(), data).expect("same dimensions")
            }
            Op::ImpulseNoise => {
                let prob = f64::from(v("prob"));
                img.map_pixels(|px| {
                    if rng.next_f64() < prob {
                        if rng.next_f64() < 0.5 {
                            [0.0; 3]
                        } else {
                            [1.0; 3]
                        }
                    } else {
                        px
                    }
                })
            }
            Op::ContrastReduce => {
                let keep = 1.0 - v("amount");
                let l = img.luma();
                let mean = (l.iter().map(|&x| f64::from(x)).sum::<f64>() / l.len() as f64) as f32;
                img.map_pixels(|px| px.map(|c| mean + keep * (c - mean)))
            }
            Op::OverSharpen => {
                let a = v("amount");
                let blurred = gaussian_blur(img, v("sigma"));
                let data = img
                    .data()
                    .iter()
                    .zip(blurred.data())
                    .map(|(&x, &b)| x + a * (x - b))
                    .collect();
                Image::from_vec(img.width(), img.height(), data).expect("same dimensions")
            }
        }
    }
}

/// Separable convolution on every channel with edge replication.
/// `taps[k]` applies at offset `k - center`.
fn convolve(img: &Image, taps_x: &[f32], taps_y: &[f32]) -> Image {
    let (w, h) = (img.width(), img.height());
    let src = img.data();
    let cx = (taps_x.len() / 2) as isize;
    let cy = (taps_y.len() / 2) as isize;
    let mut tmp = vec![0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..CHANNELS {
                let mut acc = 0f32;
                for (k, &t) in taps_x.iter().enumerate() {
                    let sx = (x as isize + k as isize - cx).clamp(0, w as isize - 1) as usize;
                    acc += t * src[(y * w + sx) * CHANNELS + c];
                }
                tmp[(y * w + x) * CHANNELS + c] = acc;
            }
        }
    }
    let mut out = vec![0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..CHANNELS {
                let mut acc = 0f32;
                for (k, &t) in taps_y.iter().enumerate() {
                    let sy = (y as isize + k as isize - cy).clamp(0, h as isize - 1) as usize;
                    acc += t * tmp[(sy * w + x) * CHANNELS + c];
                }
                out[(y * w + x) * CHANNELS + c] = acc;
            }
        }
    }
    Image::from_vec(w, h, out).expect("same dimensions")
}

pub(crate) fn gaussian_taps(sigma: f32) -> Vec<f32> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut taps: Vec<f32> = (-radius..=radius)
        .map(|t| (-(t * t) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f32 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

fn gaussian_blur(img: &Image, sigma: f32) -> Image {
    let taps = gaussian_taps(sigma);
    convolve(img, &taps, &taps)
}

/// Horizontal Gaussian streak with the second moment of a `length`-tap box
/// (`sigma = length / sqrt(12)`). Unlike a box its frequency response falls
/// monotonically with `length`, so periodic texture cannot re-emerge through
/// sidelobes as the level rises.
pub(crate) fn motion_taps(length: f32) -> Vec<f32> {
    let sigma = length.max(0.0) / 12f32.sqrt();
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (4.0 * sigma).ceil() as isize + 1;
    let mut taps: Vec<f32> = (-radius..=radius)
        .map(|t| (-(t * t) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f32 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

fn motion_blur(img: &Image, length: f32) -> Image {
    convolve(img, &motion_taps(length), &[1.0])
}

fn pixelate(img: &Image, block: f32) -> Image {
    let (w, h) = (img.width(), img.height());
    let block = block.max(1.0);
    let nw = ((w as f32 / block).round() as usize).clamp(1, w);
    let nh = ((h as f32 / block).round() as usize).clamp(1, h);
    // box-average each source pixel into its coarse cell, then nearest upsample
    let cell_x: Vec<usize> = (0..w).map(|x| x * nw / w).collect();
    let cell_y: Vec<usize> = (0..h).map(|y| y * nh / h).collect();
    let mut sums = vec![0f64; nw * nh * CHANNELS];
    let mut counts = vec![0u32; nw * nh];
    for y in 0..h {
        for x in 0..w {
            let cell = cell_y[y] * nw + cell_x[x];
            counts[cell] += 1;
            for c in 0..CHANNELS {
                sums[cell * CHANNELS + c] += f64::from(img.get(x, y, c));
            }
        }
    }
    Image::from_fn(w, h, |x, y| {
        let cell = cell_y[y] * nw + cell_x[x];
        let n = f64::from(counts[cell]);
        [0, 1, 2].map(|c| (sums[cell * CHANNELS + c] / n) as f32)
    })
}

fn bilinear(img: &Image, fx: f32, fy: f32, c: usize) -> f32 {
    let (w, h) = (img.width(), img.height());
    let fx = fx.clamp(0.0, (w - 1) as f32);
    let fy = fy.clamp(0.0, (h - 1) as f32);
    let x0 = fx.floor() as usize;
    let y0 = fy.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let tx = fx - x0 as f32;
    let ty = fy - y0 as f32;
    let top = img.get(x0, y0, c) * (1.0 - tx) + img.get(x1, y0, c) * tx;
    let bot = img.get(x0, y1, c) * (1.0 - tx) + img.get(x1, y1, c) * tx;
    top * (1.0 - ty) + bot * ty
}

/// Per-pixel random displacement, uniform in `[-amount, amount]` on each axis.
fn jitter(img: &Image, amount: f32, rng: &mut SplitMix64) -> Image {
    let a = f64::from(amount);
    Image::from_fn(img.width(), img.height(), |x, y| {
        let dx = ((2.0 * rng.next_f64() - 1.0) * a) as f32;
        let dy = ((2.0 * rng.next_f64() - 1.0) * a) as f32;
        [0, 1, 2].map(|c| bilinear(img, x as f32 + dx, y as f32 + dy, c))
    })
}

fn to_ycbcr([r, g, b]: [f32; 3]) -> [f32; 3] {
    let y = 0.299 * r + 0.587 * g + 0.114 * b;
    let cb = -0.168_736 * r - 0.331_264 * g + 0.5 * b;
    let cr = 0.5 * r - 0.418_688 * g - 0.081_312 * b;
    [y, cb, cr]
}

fn from_ycbcr([y, cb, cr]: [f32; 3]) -> [f32; 3] {
    [
        y + 1.402 * cr,
        y - 0.344_136 * cb - 0.714_136 * cr,
        y + 1.772 * cb,
    ]
}

fn chroma_subsample(img: &Image, factor: usize) -> Image {
    let (w, h) = (img.width(), img.height());
    let ycc: Vec<[f32; 3]> = (0..w * h)
        .map(|i| to_ycbcr(img.pixel(i % w, i / w)))
        .collect();
    let bw = w.div_ceil(factor);
    let bh = h.div_ceil(factor);
    let mut avg = vec![[0f64; 2]; bw * bh];
    let mut cnt = vec![0u32; bw * bh];
    for y in 0..h {
        for x in 0..w {
            let b = (y / factor) * bw + x / factor;
            let p = ycc[y * w + x];
            avg[b][0] += f64::from(p[1]);
            avg[b][1] += f64::from(p[2]);
            cnt[b] += 1;
        }
    }
    Image::from_fn(w, h, |x, y| {
        let b = (y / factor) * bw + x / factor;
        let n = f64::from(cnt[b]);
        from_ycbcr([
            ycc[y * w + x][0],
            (avg[b][0] / n) as f32,
            (avg[b][1] / n) as f32,
        ])
    })
}

const JPEG_LUMA: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, 12, 12, 14, 19, 26, 58, 60, 55, 14, 13, 16, 24, 40, 57, 69,
    56, 14, 17, 22, 29, 51, 87, 80, 62, 18, 22, 37, 56, 68, 109, 103, 77, 24, 35, 55, 64, 81,
    104, 113, 92, 49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99,
];

const JPEG_CHROMA: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99, 18, 21, 26, 66, 99, 99, 99, 99, 24, 26, 56, 99, 99, 99, 99,
    99, 47, 66, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99,
];

/// IJG quality scaling of a base quantization table.
fn scaled_table(base: &[u16; 64], quality: u32) -> [f32; 64] {
    let q = quality.clamp(1, 100);
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut out = [0f32; 64];
    for (o, &b) in out.iter_mut().zip(base) {
        *o = ((u32::from(b) * scale + 50) / 100).clamp(1, 255) as f32;
    }
    out
}

fn dct_basis() -> [[f32; 8]; 8] {
    let mut m = [[0f32; 8]; 8];
    for (u, row) in m.iter_mut().enumerate() {
        let a = if u == 0 { (1.0f32 / 8.0).sqrt() } else { (2.0f32 / 8.0).sqrt() };
        for (x, v) in row.iter_mut().enumerate() {
            *v = a * ((2 * x + 1) as f32 * u as f32 * std::f32::consts::PI / 16.0).cos();
        }
    }
    m
}

/// 8x8 block DCT quantization on YCbCr planes (no chroma subsampling).
fn jpeg_like(img: &Image, quality: u32) -> Image {
    let (w, h) = (img.width(), img.height());
    let basis = dct_basis();
    let tables = [
        scaled_table(&JPEG_LUMA, quality),
        scaled_table(&JPEG_CHROMA, quality),
        scaled_table(&JPEG_CHROMA, quality),
    ];
    let mut planes: Vec<Vec<f32>> = vec![vec![0.0; w * h]; 3];
    for i in 0..w * h {
        let p = to_ycbcr(img.pixel(i % w, i / w));
        planes[0][i] = p[0] * 255.0 - 128.0;
        planes[1][i] = p[1] * 255.0;
        planes[2][i] = p[2] * 255.0;
    }
    for (plane, table) in planes.iter_mut().zip(&tables) {
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                let mut block = [[0f32; 8]; 8];
                for (y, row) in block.iter_mut().enumerate() {
                    for (x, v) in row.iter_mut().enumerate() {
                        let sx = (bx + x).min(w - 1);
                        let sy = (by + y).min(h - 1);
                        *v = plane[sy * w + sx];
                    }
                }
                let coef = dct2(&block, &basis);
                let mut quant = [[0f32; 8]; 8];
                for u in 0..8 {
                    for v in 0..8 {
                        let t = table[u * 8 + v];
                        quant[u][v] = (coef[u][v] / t).round() * t;
                    }
                }
                let rec = idct2(&quant, &basis);
                for y in 0..8.min(h - by) {
                    for x in 0..8.min(w - bx) {
                        plane[(by + y) * w + bx + x] = rec[y][x];
                    }
                }
            }
        }
    }
    Image::from_fn(w, h, |x, y| {
        let i = y * w + x;
        from_ycbcr([
            (planes[0][i] + 128.0) / 255.0,
            planes[1][i] / 255.0,
            planes[2][i] / 255.0,
        ])
    })
}

fn dct2(block: &[[f32; 8]; 8], m: &[[f32; 8]; 8]) -> [[f32; 8]; 8] {
    // C = M B M^T
    let mut tmp = [[0f32; 8]; 8];
    for u in 0..8 {
        for x in 0..8 {
            tmp[u][x] = (0..8).map(|y| m[u][y] * block[y][x]).sum();
        }
    }
    let mut out = [[0f32; 8]; 8];
    for u in 0..8 {
        for v in 0..8 {
            out[u][v] = (0..8).map(|x| tmp[u][x] * m[v][x]).sum();
        }
    }
    out
}

fn idct2(coef: &[[f32; 8]; 8], m: &[[f32; 8]; 8]) -> [[f32; 8]; 8] {
    // B = M^T C M
    let mut tmp = [[0f32; 8]; 8];
    for y in 0..8 {
        for v in 0..8 {
            tmp[y][v] = (0..8).map(|u| m[u][y] * coef[u][v]).sum();
        }
    }
    let mut out = [[0f32; 8]; 8];
    for y in 0..8 {
        for x in 0..8 {
            out[y][x] = (0..8).map(|v| tmp[y][v] * m[v][x]).sum();
        }
    }
    out
}
