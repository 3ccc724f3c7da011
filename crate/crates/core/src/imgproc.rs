//! Raster substrate: decoding, encoding, cropping and resizing.
//!
//! Images are 3-channel, row-major, channel-interleaved `f32` samples in
//! `[0, 1]`. Only binary PPM (P6) and 8-bit RGB/RGBA PNG are read.

use std::fs;
use std::io::{BufWriter, Cursor, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

pub const CHANNELS: usize = 3;

const PNG_MAGIC: &[u8] = b"\x89PNG\r\n\x1a\n";

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    /// Builds an image from interleaved RGB samples, clamping into `[0, 1]`.
    pub fn from_vec(width: usize, height: usize, mut data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if data.len() != width * height * CHANNELS {
            return Err(Error::Shape(format!(
                "{width}x{height} image needs {} samples, got {}",
                width * height * CHANNELS,
                data.len()
            )));
        }
        clamp_unit(&mut data);
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self::from_vec(width, height, data).expect("positive dimensions")
    }

    /// Builds an image by evaluating `f(x, y)` at every pixel.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * CHANNELS);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self::from_vec(width, height, data).expect("positive dimensions")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * CHANNELS + c]
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Applies `f` to every pixel, then re-clamps.
    pub fn map_pixels(&self, mut f: impl FnMut([f32; 3]) -> [f32; 3]) -> Image {
        let mut data = Vec::with_capacity(self.data.len());
        for px in self.data.chunks_exact(CHANNELS) {
            data.extend_from_slice(&f([px[0], px[1], px[2]]));
        }
        Image::from_vec(self.width, self.height, data).expect("same dimensions")
    }

    /// Rec. 601 luma plane.
    pub fn luma(&self) -> Vec<f32> {
        self.data
            .chunks_exact(CHANNELS)
            .map(|p| luma(p[0], p[1], p[2]))
            .collect()
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Image> {
        if x0 + w > self.width || y0 + h > self.height || w == 0 || h == 0 {
            return Err(Error::InvalidArgument(format!(
                "window {w}x{h}+{x0}+{y0} outside {}x{}",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(w * h * CHANNELS);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * CHANNELS;
            data.extend_from_slice(&self.data[start..start + w * CHANNELS]);
        }
        Ok(Image {
            width: w,
            height: h,
            data,
        })
    }

    /// 8-bit quantization used by both encoders.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| to_u8(v)).collect()
    }
}

#[inline]
pub fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

#[inline]
fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub(crate) fn clamp_unit(data: &mut [f32]) {
    for v in data {
        *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    }
}

fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Image {
    let data = bytes.iter().map(|&b| f32::from(b) / 255.0).collect();
    Image {
        width,
        height,
        data,
    }
}

/// Decodes a PNG or binary PPM file.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes, path)
}

/// Decodes an in-memory PNG or PPM; `path` is only used in error messages.
pub fn decode_image(bytes: &[u8], path: &Path) -> Result<Image> {
    if bytes.starts_with(PNG_MAGIC) {
        decode_png(bytes, path)
    } else if bytes.starts_with(b"P6") {
        decode_ppm(bytes, path)
    } else {
        let shown: String = bytes
            .iter()
            .take(2)
            .map(|&b| if b.is_ascii_graphic() { b as char } else { '?' })
            .collect();
        Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            detail: format!("unrecognized magic {shown:?}"),
        })
    }
}

fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Image> {
    let corrupt = |detail: &str| Error::CorruptHeader {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(corrupt("header ends early")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(corrupt("expected a decimal header field"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).map_err(|_| corrupt("non-ascii"))?;
        *field = text.parse().map_err(|_| corrupt("header field overflows"))?;
    }
    // exactly one whitespace byte separates maxval from the raster
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(corrupt("missing separator after maxval"));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(corrupt("zero dimension"));
    }
    if maxval != 255 {
        return Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            detail: format!("PPM maxval {maxval} (only 255 is supported)"),
        });
    }
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(CHANNELS))
        .ok_or_else(|| corrupt("dimensions overflow"))?;
    let raster = &bytes[pos..];
    if raster.len() < need {
        return Err(corrupt(&format!(
            "raster truncated: {} of {need} bytes",
            raster.len()
        )));
    }
    Ok(from_rgb8(width, height, &raster[..need]))
}

fn decode_png(bytes: &[u8], path: &Path) -> Result<Image> {
    let corrupt = |e: png::DecodingError| Error::CorruptHeader {
        path: path.to_path_buf(),
        detail: e.to_string(),
    };
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(corrupt)?;
    let (color, depth) = {
        let info = reader.info();
        (info.color_type, info.bit_depth)
    };
    if depth != png::BitDepth::Eight {
        return Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            detail: format!("PNG bit depth {depth:?} (only 8-bit is supported)"),
        });
    }
    let stride = match color {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => {
            return Err(Error::UnsupportedFormat {
                path: path.to_path_buf(),
                detail: format!("PNG color type {other:?} (only RGB/RGBA)"),
            })
        }
    };
    let size = reader.output_buffer_size().ok_or_else(|| Error::CorruptHeader {
        path: path.to_path_buf(),
        detail: "image too large".into(),
    })?;
    let mut buf = vec![0u8; size];
    let frame = reader.next_frame(&mut buf).map_err(corrupt)?;
    let (w, h) = (frame.width as usize, frame.height as usize);
    let mut rgb = Vec::with_capacity(w * h * CHANNELS);
    for row in buf[..frame.line_size * h].chunks_exact(frame.line_size) {
        for px in row[..w * stride].chunks_exact(stride) {
            rgb.extend_from_slice(&px[..3]);
        }
    }
    Ok(from_rgb8(w, h, &rgb))
}

/// Binary PPM (P6, maxval 255).
pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.to_rgb8());
    out
}

pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let fail = |e: png::EncodingError| Error::Format(format!("png encode: {e}"));
        let mut writer = enc.write_header().map_err(fail)?;
        writer.write_image_data(&img.to_rgb8()).map_err(fail)?;
        writer.finish().map_err(fail)?;
    }
    Ok(out)
}

/// Writes PNG when the extension is `.png`, PPM otherwise.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let is_png = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"));
    let bytes = if is_png { encode_png(img)? } else { encode_ppm(img) };
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Offset of a seeded square crop: `x0 = below(w - size + 1)` is drawn first,
/// then `y0 = below(h - size + 1)`, from `SplitMix64::new(seed)`.
pub fn crop_offset(width: usize, height: usize, size: usize, seed: u64) -> Result<(usize, usize)> {
    if size == 0 || size > width.min(height) {
        return Err(Error::CropTooLarge {
            size,
            width,
            height,
        });
    }
    let mut rng = SplitMix64::new(seed);
    let x0 = rng.below((width - size + 1) as u64) as usize;
    let y0 = rng.below((height - size + 1) as u64) as usize;
    Ok((x0, y0))
}

pub fn random_crop(img: &Image, size: usize, seed: u64) -> Result<Image> {
    let (x0, y0) = crop_offset(img.width, img.height, size, seed)?;
    img.crop(x0, y0, size, size)
}

/// Bilinear resize with pixel-center alignment.
pub fn resize(img: &Image, new_w: usize, new_h: usize) -> Result<Image> {
    if new_w == 0 || new_h == 0 {
        return Err(Error::InvalidArgument("resize target must be positive".into()));
    }
    if new_w == img.width && new_h == img.height {
        return Ok(img.clone());
    }
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f32)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, (s - i0 as f64) as f32)
            })
            .collect()
    };
    let xs = taps(img.width, new_w);
    let ys = taps(img.height, new_h);
    let mut data = Vec::with_capacity(new_w * new_h * CHANNELS);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for c in 0..CHANNELS {
                let top = img.get(x0, y0, c) * (1.0 - fx) + img.get(x1, y0, c) * fx;
                let bot = img.get(x0, y1, c) * (1.0 - fx) + img.get(x1, y1, c) * fx;
                data.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Image::from_vec(new_w, new_h, data)
}

/// Resizes so the shorter side equals `target`, keeping the aspect ratio.
pub fn resize_shortest_side(img: &Image, target: usize) -> Result<Image> {
    if target == 0 {
        return Err(Error::InvalidArgument("target side must be positive".into()));
    }
    let (w, h) = (img.width, img.height);
    let short = w.min(h);
    if short == target {
        return Ok(img.clone());
    }
    let scale = target as f64 / short as f64;
    let (nw, nh) = if w <= h {
        (target, ((h as f64 * scale).round() as usize).max(1))
    } else {
        (((w as f64 * scale).round() as usize).max(1), target)
    };
    resize(img, nw, nh)
}
