//! `HRQM` checkpoint files.
//!
//! ```text
//! "HRQM" | version u32 | preset (u16 len, utf-8) | k, h, d, d_text u32
//! tensor count u32 | per tensor: name (u16 len, utf-8), ndim u32, dims u32..., f32 data
//! optimizer flag u8 | if 1: step u64, lr0 f64, lr_min f64, total_steps u64,
//!   weight_decay f64, beta1 f64, beta2 f64, eps f64, then the m and v
//!   tensors in trainable order using the tensor layout above
//! ```
//! All integers and floats are little-endian.

use std::path::Path;

use super::{AdamHyper, AdamState, Affine, Dims, Preset, ScorerParams};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"HRQM";
pub const VERSION: u32 = 1;

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    put_str(out, name);
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn tensor_data(p: &ScorerParams, name: &str) -> Vec<f64> {
    match name {
        "feat_mean" => p.feat_mean.clone(),
        "feat_scale" => p.feat_scale.clone(),
        _ => p
            .trainable()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| t.to_vec())
            .unwrap_or_default(),
    }
}

pub fn encode_checkpoint(params: &ScorerParams, opt: Option<&AdamState>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_str(&mut out, params.preset.as_str());
    let d = params.dims();
    for v in [d.k, d.h, d.d, d.d_text] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    let shapes = params.shapes();
    out.extend_from_slice(&(shapes.len() as u32).to_le_bytes());
    for (name, shape) in &shapes {
        put_tensor(&mut out, name, shape, &tensor_data(params, name));
    }
    match opt {
        None => out.push(0),
        Some(st) => {
            out.push(1);
            let h = &st.hyper;
            out.extend_from_slice(&st.step.to_le_bytes());
            out.extend_from_slice(&h.lr0.to_le_bytes());
            out.extend_from_slice(&h.lr_min.to_le_bytes());
            out.extend_from_slice(&h.total_steps.to_le_bytes());
            for v in [h.weight_decay, h.beta1, h.beta2, h.eps] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for (prefix, moments) in [("m.", &st.m), ("v.", &st.v)] {
                for ((name, t), data) in params.trainable().iter().zip(moments) {
                    put_tensor(&mut out, &format!("{prefix}{name}"), &[t.len()], data);
                }
            }
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("checkpoint truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("tensor name is not UTF-8".into()))
    }

    fn tensor(&mut self, want_name: &str, want_shape: &[usize]) -> Result<Vec<f64>> {
        let name = self.string()?;
        let ndim = self.u32()? as usize;
        let shape = (0..ndim).map(|_| self.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        if name != want_name || shape != want_shape {
            return Err(Error::Format(format!(
                "expected tensor `{want_name}` {want_shape:?}, found `{name}` {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect())
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ScorerParams, Option<AdamState>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Format("not an HRQM checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let preset: Preset = r.string()?.parse()?;
    let dims = Dims {
        k: r.u32()? as usize,
        h: r.u32()? as usize,
        d: r.u32()? as usize,
        d_text: r.u32()? as usize,
    };
    let mut p = ScorerParams {
        preset,
        feat_mean: vec![0.0; dims.k],
        feat_scale: vec![1.0; dims.k],
        enc1: Affine::zeros(dims.h, dims.k),
        enc2: Affine::zeros(dims.d, dims.h),
        attn_query: vec![0.0; dims.d],
        decision: Affine::zeros(1, dims.d),
        text_proj: Affine::zeros(dims.d_text, dims.d),
        log_tau_emb: 0.0,
        tau_align: 0.0,
    };
    let shapes = p.shapes();
    let count = r.u32()? as usize;
    if count != shapes.len() {
        return Err(Error::Format(format!("expected {} tensors, found {count}", shapes.len())));
    }
    for (name, shape) in &shapes {
        let data = r.tensor(name, shape)?;
        match *name {
            "feat_mean" => p.feat_mean = data,
            "feat_scale" => p.feat_scale = data,
            _ => {
                let mut t = p.trainable_mut();
                let slot = t.iter_mut().find(|(n, _)| n == name).expect("known tensor");
                slot.1.copy_from_slice(&data);
            }
        }
    }
    let opt = match r.u8()? {
        0 => None,
        1 => {
            let step = r.u64()?;
            let hyper = AdamHyper {
                lr0: r.f64()?,
                lr_min: r.f64()?,
                total_steps: r.u64()?,
                weight_decay: r.f64()?,
                beta1: r.f64()?,
                beta2: r.f64()?,
                eps: r.f64()?,
            };
            let names: Vec<(&str, usize)> = p.trainable().iter().map(|(n, t)| (*n, t.len())).collect();
            let mut read = |prefix: &str| -> Result<Vec<Vec<f64>>> {
                names.iter().map(|(n, len)| r.tensor(&format!("{prefix}{n}"), &[*len])).collect()
            };
            let m = read("m.")?;
            let v = read("v.")?;
            Some(AdamState { hyper, step, m, v })
        }
        f => return Err(Error::Format(format!("bad optimizer flag {f}"))),
    };
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    if !p.is_finite() {
        return Err(Error::Format("checkpoint holds non-finite parameters".into()));
    }
    Ok((p, opt))
}

pub fn save_checkpoint(path: &Path, params: &ScorerParams, opt: Option<&AdamState>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(params, opt)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ScorerParams, Option<AdamState>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
