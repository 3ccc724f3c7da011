//! Attention-pooled scorer over patch features.
//!
//! Per record: patch features are standardized, encoded by
//! `softplus(W1 x + b1)` then `W2 h + b2`, pooled with softmax weights over
//! the logits `e_p · query`, and scored by `q = sigmoid(v · F + c)`.

mod checkpoint;
mod gradcheck;
mod optim;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, MAGIC as CHECKPOINT_MAGIC};
pub use gradcheck::{
    analytic_gradient, grad_check, numeric_check, random_batch, random_params, GradCheck, Objective, REL_FLOOR,
};
pub use optim::{adamw_step, cosine_lr, AdamHyper, AdamState};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{PatchFeatureGrid, FEATURE_DIM};
use crate::losses::sigmoid;
use crate::losses::softplus;
use crate::rng::{derive_seed, SplitMix64};

/// Bounds of the stored log-scale `τ_align`.
pub const TAU_ALIGN_RANGE: (f64, f64) = (0.0, 4.605_170_185_988_092);
/// Bounds of `ln τ_emb`, keeping `exp(s / τ_emb)` representable.
pub const LOG_TAU_EMB_RANGE: (f64, f64) = (-2.302_585_092_994_046, 4.605_170_185_988_092);

/// Dense map `y = W x + b`, `W` row-major `out x inp`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub out: usize,
    pub inp: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Affine {
    pub fn zeros(out: usize, inp: usize) -> Self {
        Self {
            out,
            inp,
            w: vec![0.0; out * inp],
            b: vec![0.0; out],
        }
    }

    /// Weights uniform in `±1/sqrt(inp)`, zero bias.
    pub fn fan_in(out: usize, inp: usize, rng: &mut SplitMix64) -> Self {
        let bound = 1.0 / (inp as f64).sqrt();
        let w = (0..out * inp).map(|_| bound * (2.0 * rng.next_f64() - 1.0)).collect();
        Self {
            out,
            inp,
            w,
            b: vec![0.0; out],
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.b.clone();
        for (o, yo) in y.iter_mut().enumerate() {
            let row = &self.w[o * self.inp..(o + 1) * self.inp];
            *yo += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
        y
    }

    /// `Wᵀ g`.
    pub fn apply_transpose(&self, g: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.inp];
        for (o, &go) in g.iter().enumerate() {
            let row = &self.w[o * self.inp..(o + 1) * self.inp];
            for (xi, wi) in x.iter_mut().zip(row) {
                *xi += go * wi;
            }
        }
        x
    }

    /// Adds the gradient of `g · (W x + b)`: `W += g xᵀ`, `b += g`.
    pub fn accumulate_outer(&mut self, g: &[f64], x: &[f64]) {
        for (o, &go) in g.iter().enumerate() {
            self.b[o] += go;
            let row = &mut self.w[o * self.inp..(o + 1) * self.inp];
            for (wi, xi) in row.iter_mut().zip(x) {
                *wi += go * xi;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.w.iter_mut().chain(self.b.iter_mut()).for_each(|v| *v *= s);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    #[default]
    Small,
    Base,
    Custom,
}

impl Preset {
    /// `(H, D)` for the named presets.
    pub fn widths(self) -> Option<(usize, usize)> {
        match self {
            Preset::Small => Some((64, 32)),
            Preset::Base => Some((256, 128)),
            Preset::Custom => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Small => "small",
            Preset::Base => "base",
            Preset::Custom => "custom",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small" => Ok(Preset::Small),
            "base" => Ok(Preset::Base),
            "custom" => Ok(Preset::Custom),
            _ => Err(Error::Config(format!("unknown preset `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub k: usize,
    pub h: usize,
    pub d: usize,
    pub d_text: usize,
}

impl Dims {
    pub fn preset(p: Preset, d_text: usize) -> Result<Self> {
        let (h, d) = p
            .widths()
            .ok_or_else(|| Error::Config("the custom preset needs explicit widths".into()))?;
        Ok(Self {
            k: FEATURE_DIM,
            h,
            d,
            d_text,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScorerParams {
    pub preset: Preset,
    /// Per-feature standardization, fixed before training (not trained).
    pub feat_mean: Vec<f64>,
    pub feat_scale: Vec<f64>,
    pub enc1: Affine,
    pub enc2: Affine,
    pub attn_query: Vec<f64>,
    pub decision: Affine,
    pub text_proj: Affine,
    pub log_tau_emb: f64,
    /// Log-scale of the alignment logits; `s = e^{tau_align} ẑ·t`.
    pub tau_align: f64,
}

impl ScorerParams {
    pub fn new(preset: Preset, dims: Dims, seed: u64) -> Self {
        let mut r1 = SplitMix64::new(derive_seed(seed, 0));
        let mut r2 = SplitMix64::new(derive_seed(seed, 1));
        let mut r3 = SplitMix64::new(derive_seed(seed, 2));
        Self {
            preset,
            feat_mean: vec![0.0; dims.k],
            feat_scale: vec![1.0; dims.k],
            enc1: Affine::fan_in(dims.h, dims.k, &mut r1),
            enc2: Affine::fan_in(dims.d, dims.h, &mut r2),
            attn_query: vec![0.0; dims.d],
            decision: Affine::zeros(1, dims.d),
            text_proj: Affine::fan_in(dims.d_text, dims.d, &mut r3),
            log_tau_emb: 0.0,
            tau_align: (1.0f64 / 0.07).ln(),
        }
    }

    pub fn dims(&self) -> Dims {
        Dims {
            k: self.enc1.inp,
            h: self.enc1.out,
            d: self.enc2.out,
            d_text: self.text_proj.out,
        }
    }

    pub fn tau_emb(&self) -> f64 {
        self.log_tau_emb.exp()
    }

    /// Same shapes, every value zero (gradient accumulator).
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.trainable_mut() {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    /// Trainable tensors in checkpoint order.
    pub fn trainable(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("enc1.w", &self.enc1.w),
            ("enc1.b", &self.enc1.b),
            ("enc2.w", &self.enc2.w),
            ("enc2.b", &self.enc2.b),
            ("attn_query", &self.attn_query),
            ("decision.w", &self.decision.w),
            ("decision.b", &self.decision.b),
            ("text_proj.w", &self.text_proj.w),
            ("text_proj.b", &self.text_proj.b),
            ("log_tau_emb", std::slice::from_ref(&self.log_tau_emb)),
            ("tau_align", std::slice::from_ref(&self.tau_align)),
        ]
    }

    pub fn trainable_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("enc1.w", &mut self.enc1.w),
            ("enc1.b", &mut self.enc1.b),
            ("enc2.w", &mut self.enc2.w),
            ("enc2.b", &mut self.enc2.b),
            ("attn_query", &mut self.attn_query),
            ("decision.w", &mut self.decision.w),
            ("decision.b", &mut self.decision.b),
            ("text_proj.w", &mut self.text_proj.w),
            ("text_proj.b", &mut self.text_proj.b),
            ("log_tau_emb", std::slice::from_mut(&mut self.log_tau_emb)),
            ("tau_align", std::slice::from_mut(&mut self.tau_align)),
        ]
    }

    /// Declared shape of every stored tensor, buffers first.
    pub(crate) fn shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let Dims { k, h, d, d_text } = self.dims();
        vec![
            ("feat_mean", vec![k]),
            ("feat_scale", vec![k]),
            ("enc1.w", vec![h, k]),
            ("enc1.b", vec![h]),
            ("enc2.w", vec![d, h]),
            ("enc2.b", vec![d]),
            ("attn_query", vec![d]),
            ("decision.w", vec![1, d]),
            ("decision.b", vec![1]),
            ("text_proj.w", vec![d_text, d]),
            ("text_proj.b", vec![d_text]),
            ("log_tau_emb", vec![1]),
            ("tau_align", vec![1]),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.trainable().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
            && self.feat_mean.iter().chain(&self.feat_scale).all(|v| v.is_finite())
    }

    /// Clamps the two temperature parameters into their declared ranges.
    pub fn clamp_scales(&mut self) {
        self.tau_align = self.tau_align.clamp(TAU_ALIGN_RANGE.0, TAU_ALIGN_RANGE.1);
        self.log_tau_emb = self.log_tau_emb.clamp(LOG_TAU_EMB_RANGE.0, LOG_TAU_EMB_RANGE.1);
    }

    /// Sets the standardization buffers to the per-feature mean and standard
    /// deviation over every patch of `grids` (unit scale for constant features).
    pub fn fit_standardization<'a>(&mut self, grids: impl IntoIterator<Item = &'a PatchFeatureGrid>) {
        let k = self.feat_mean.len();
        let (mut n, mut s, mut s2) = (0usize, vec![0.0; k], vec![0.0; k]);
        for g in grids {
            for p in g.iter() {
                n += 1;
                for f in 0..k {
                    s[f] += p[f];
                    s2[f] += p[f] * p[f];
                }
            }
        }
        if n == 0 {
            return;
        }
        for f in 0..k {
            let m = s[f] / n as f64;
            let var = (s2[f] / n as f64 - m * m).max(0.0);
            self.feat_mean[f] = m;
            self.feat_scale[f] = if var.sqrt() > 1e-9 { var.sqrt() } else { 1.0 };
        }
    }
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
struct Cache {
    x: Vec<Vec<f64>>,
    a: Vec<Vec<f64>>,
    h: Vec<Vec<f64>>,
    e: Vec<Vec<f64>>,
    norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordOutput {
    /// Pooled embedding `F_emb`.
    pub embedding: Vec<f64>,
    /// `F_emb / ‖F_emb‖`.
    pub embedding_hat: Vec<f64>,
    pub attention: Vec<f64>,
    pub score: f64,
    cache: Cache,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchRecord {
    pub id: String,
    pub features: PatchFeatureGrid,
    pub severity: f64,
    /// Unit prompt embedding of width `D_text`.
    pub prompt_emb: Vec<f64>,
    pub out: Option<RecordOutput>,
}

impl BatchRecord {
    pub fn new(id: impl Into<String>, features: PatchFeatureGrid, severity: f64, prompt_emb: Vec<f64>) -> Self {
        Self {
            id: id.into(),
            features,
            severity,
            prompt_emb,
            out: None,
        }
    }

    pub fn output(&self) -> Result<&RecordOutput> {
        self.out.as_ref().ok_or(Error::MissingForward)
    }
}

fn forward_one(params: &ScorerParams, grid: &PatchFeatureGrid) -> RecordOutput {
    let p = grid.patches();
    let mut cache = Cache {
        x: Vec::with_capacity(p),
        a: Vec::with_capacity(p),
        h: Vec::with_capacity(p),
        e: Vec::with_capacity(p),
        norm: 0.0,
    };
    let mut logits = Vec::with_capacity(p);
    for f in grid.iter() {
        let x: Vec<f64> = f
            .iter()
            .zip(params.feat_mean.iter().zip(&params.feat_scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect();
        let a = params.enc1.apply(&x);
        let h: Vec<f64> = a.iter().map(|&v| softplus(v)).collect();
        let e = params.enc2.apply(&h);
        logits.push(e.iter().zip(&params.attn_query).map(|(a, b)| a * b).sum::<f64>());
        cache.x.push(x);
        cache.a.push(a);
        cache.h.push(h);
        cache.e.push(e);
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut attention: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = attention.iter().sum();
    attention.iter_mut().for_each(|w| *w /= z);
    let d = params.enc2.out;
    let mut embedding = vec![0.0; d];
    for (w, e) in attention.iter().zip(&cache.e) {
        for (f, v) in embedding.iter_mut().zip(e) {
            *f += w * v;
        }
    }
    let norm = embedding.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    cache.norm = norm;
    let embedding_hat = embedding.iter().map(|v| v / norm).collect();
    let score = sigmoid(params.decision.apply(&embedding)[0]);
    RecordOutput {
        embedding,
        embedding_hat,
        attention,
        score,
        cache,
    }
}

/// Fills `out` on every record.
pub fn forward(params: &ScorerParams, batch: &mut [BatchRecord]) -> Result<()> {
    let k = params.enc1.inp;
    for r in batch.iter() {
        if r.features.dim != k {
            return Err(Error::Shape(format!(
                "record `{}` has feature width {}, model expects {k}",
                r.id, r.features.dim
            )));
        }
        if r.features.patches() == 0 {
            return Err(Error::Shape(format!("record `{}` has no patches", r.id)));
        }
    }
    for r in batch.iter_mut() {
        r.out = Some(forward_one(params, &r.features));
    }
    Ok(())
}

/// Score and normalized embedding of one feature grid.
pub fn score_grid(params: &ScorerParams, grid: &PatchFeatureGrid) -> Result<(f64, Vec<f64>)> {
    let mut rec = [BatchRecord::new("", grid.clone(), 0.0, Vec::new())];
    forward(params, &mut rec)?;
    let out = rec[0].out.take().ok_or(Error::MissingForward)?;
    Ok((out.score, out.embedding_hat))
}

/// Upstream gradients flowing into the scorer.
#[derive(Debug, Clone, PartialEq)]
pub struct Upstream {
    pub dq: Vec<f64>,
    pub d_emb_hat: Vec<Vec<f64>>,
    pub d_tau_emb: f64,
    pub d_tau_align: f64,
    pub d_text_proj: Option<Affine>,
}

impl Upstream {
    pub fn zeros(n: usize, d: usize) -> Self {
        Self {
            dq: vec![0.0; n],
            d_emb_hat: vec![vec![0.0; d]; n],
            d_tau_emb: 0.0,
            d_tau_align: 0.0,
            d_text_proj: None,
        }
    }
}

fn add_into(acc: &mut ScorerParams, g: &ScorerParams) {
    for ((_, a), (_, b)) in acc.trainable_mut().into_iter().zip(g.trainable()) {
        for (x, y) in a.iter_mut().zip(b) {
            *x += y;
        }
    }
}

/// Gradients of every trainable parameter, shaped like `params`.
pub fn backward(params: &ScorerParams, batch: &[BatchRecord], up: &Upstream) -> Result<ScorerParams> {
    if up.dq.len() != batch.len() || up.d_emb_hat.len() != batch.len() {
        return Err(Error::Shape(format!(
            "upstream covers {} records, batch has {}",
            up.dq.len(),
            batch.len()
        )));
    }
    let mut g_total = params.zeros_like();
    let d = params.enc2.out;
    for (i, r) in batch.iter().enumerate() {
        let out = r.output()?;
        // summed per record so duplicated records contribute identically
        let mut gr = params.zeros_like();
        let g = &mut gr;
        let c = &out.cache;
        let q = out.score;
        let dlogit = up.dq[i] * q * (1.0 - q);
        let mut df: Vec<f64> = params.decision.w.iter().map(|v| dlogit * v).collect();
        g.decision.accumulate_outer(&[dlogit], &out.embedding);
        let gh = &up.d_emb_hat[i];
        let fh = &out.embedding_hat;
        let proj = gh.iter().zip(fh).map(|(a, b)| a * b).sum::<f64>();
        for k in 0..d {
            df[k] += (gh[k] - fh[k] * proj) / c.norm;
        }
        let gf = df.iter().zip(&out.embedding).map(|(a, b)| a * b).sum::<f64>();
        for (p, w) in out.attention.iter().enumerate() {
            let e = &c.e[p];
            let ge = df.iter().zip(e).map(|(a, b)| a * b).sum::<f64>();
            let dl = w * (ge - gf);
            let de: Vec<f64> = (0..d).map(|k| w * df[k] + dl * params.attn_query[k]).collect();
            for k in 0..d {
                g.attn_query[k] += dl * e[k];
            }
            g.enc2.accumulate_outer(&de, &c.h[p]);
            let dh = params.enc2.apply_transpose(&de);
            let da: Vec<f64> = dh.iter().zip(&c.a[p]).map(|(g, &a)| g * sigmoid(a)).collect();
            g.enc1.accumulate_outer(&da, &c.x[p]);
        }
        add_into(&mut g_total, &gr);
    }
    let mut g = g_total;
    g.log_tau_emb = up.d_tau_emb * params.tau_emb();
    g.tau_align = up.d_tau_align;
    if let Some(tp) = &up.d_text_proj {
        g.text_proj.w.clone_from(&tp.w);
        g.text_proj.b.clone_from(&tp.b);
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_dims() -> Dims {
        Dims {
            k: FEATURE_DIM,
            h: 6,
            d: 4,
            d_text: 8,
        }
    }

    fn grid(seed: u64, patches: usize) -> PatchFeatureGrid {
        let mut r = SplitMix64::new(seed);
        let data = (0..patches * FEATURE_DIM).map(|_| r.next_f64()).collect();
        PatchFeatureGrid::new(1, patches, FEATURE_DIM, data).unwrap()
    }

    fn randomized(seed: u64) -> ScorerParams {
        let mut p = ScorerParams::new(Preset::Custom, small_dims(), seed);
        let mut r = SplitMix64::new(seed ^ 99);
        for v in p.attn_query.iter_mut().chain(p.decision.w.iter_mut()) {
            *v = r.next_f64() - 0.5;
        }
        p
    }

    #[test]
    fn single_patch_gets_full_weight() {
        let p = randomized(1);
        let mut b = [BatchRecord::new("a", grid(2, 1), 0.0, vec![])];
        forward(&p, &mut b).unwrap();
        let out = b[0].out.as_ref().unwrap();
        assert_eq!(out.attention, vec![1.0]);
        assert_eq!(out.embedding, out.cache.e[0]);
    }

    #[test]
    fn identical_patches_split_evenly() {
        let g = grid(3, 1);
        let two = PatchFeatureGrid::new(1, 2, FEATURE_DIM, [g.data.clone(), g.data].concat()).unwrap();
        let mut b = [BatchRecord::new("a", two, 0.0, vec![])];
        forward(&randomized(4), &mut b).unwrap();
        assert_eq!(b[0].out.as_ref().unwrap().attention, vec![0.5, 0.5]);
    }

    #[test]
    fn zero_decision_scores_half() {
        let p = ScorerParams::new(Preset::Small, Dims::preset(Preset::Small, 64).unwrap(), 5);
        let mut b: Vec<_> = (0..3).map(|i| BatchRecord::new("r", grid(i, 4), 0.0, vec![])).collect();
        forward(&p, &mut b).unwrap();
        for r in &b {
            let o = r.out.as_ref().unwrap();
            assert_eq!(o.score, 0.5);
            let n: f64 = o.embedding_hat.iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-12);
            assert!((o.attention.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn width_mismatch_and_missing_forward() {
        let p = randomized(1);
        let g = PatchFeatureGrid::new(1, 1, 3, vec![0.0; 3]).unwrap();
        assert!(matches!(forward(&p, &mut [BatchRecord::new("x", g, 0.0, vec![])]), Err(Error::Shape(_))));
        let b = [BatchRecord::new("y", grid(1, 2), 0.0, vec![])];
        assert!(matches!(backward(&p, &b, &Upstream::zeros(1, 4)), Err(Error::MissingForward)));
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let p = randomized(6);
        let mut b: Vec<_> = (0..2).map(|i| BatchRecord::new("r", grid(i, 3), 0.0, vec![])).collect();
        forward(&p, &mut b).unwrap();
        let g = backward(&p, &b, &Upstream::zeros(2, 4)).unwrap();
        assert!(g.trainable().iter().all(|(_, t)| t.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn duplicated_record_doubles_gradient() {
        let p = randomized(7);
        let r = BatchRecord::new("r", grid(9, 3), 0.0, vec![]);
        let mut one = vec![r.clone()];
        let mut two = vec![r.clone(), r];
        forward(&p, &mut one).unwrap();
        forward(&p, &mut two).unwrap();
        let mut up1 = Upstream::zeros(1, 4);
        up1.dq[0] = 0.7;
        up1.d_emb_hat[0] = vec![0.1, -0.2, 0.3, 0.05];
        let mut up2 = Upstream::zeros(2, 4);
        up2.dq = vec![0.7, 0.7];
        up2.d_emb_hat = vec![up1.d_emb_hat[0].clone(); 2];
        let g1 = backward(&p, &one, &up1).unwrap();
        let g2 = backward(&p, &two, &up2).unwrap();
        for ((_, a), (_, b)) in g1.trainable().iter().zip(g2.trainable()) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(2.0 * x, *y);
            }
        }
    }

    #[test]
    fn per_record_outputs_ignore_batch_order() {
        let p = randomized(8);
        let recs: Vec<_> = (0..4).map(|i| BatchRecord::new(i.to_string(), grid(i, 5), 0.0, vec![])).collect();
        let mut fwd = recs.clone();
        let mut rev: Vec<_> = recs.into_iter().rev().collect();
        forward(&p, &mut fwd).unwrap();
        forward(&p, &mut rev).unwrap();
        rev.reverse();
        assert_eq!(fwd, rev);
    }
}
