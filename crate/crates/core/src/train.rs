//! Training loop and whole-image scoring.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::data::epoch_plan;
use crate::error::{Error, Result};
use crate::features::extract_patch_features;
use crate::imgproc::Image;
use crate::losses::{lambda_emb_at, total_loss, LossBreakdown, LossConfig, LossInputs};
use crate::model::{adamw_step, backward, forward, AdamHyper, AdamState, BatchRecord, ScorerParams, Upstream};
use crate::rng::derive_seed;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub epochs: usize,
    /// `total_steps == 0` stretches the cosine schedule over the whole run.
    pub hyper: AdamHyper,
    pub loss: LossConfig,
    /// Keys the per-epoch batch shuffle.
    pub master_seed: u64,
    /// Keys the per-step pair-of-pairs subsampling.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    /// 1-based.
    pub epoch: usize,
    /// 0-based over the whole run.
    pub step: usize,
    pub batch: usize,
    pub lr: f64,
    pub breakdown: LossBreakdown,
}

pub fn log_header() -> String {
    let mut cols = vec!["epoch", "step", "batch", "lr"];
    cols.extend(LossBreakdown::CSV_COLUMNS);
    cols.extend(["rank_empty", "emb_empty"]);
    cols.join(",")
}

pub fn log_line(r: &StepRecord) -> String {
    let mut s = format!("{},{},{},{}", r.epoch, r.step, r.batch, r.lr);
    for v in r.breakdown.csv_values() {
        s.push_str(&format!(",{v}"));
    }
    s.push_str(&format!(
        ",{},{}",
        u8::from(r.breakdown.rank_empty),
        u8::from(r.breakdown.emb_empty)
    ));
    s
}

pub fn write_log(path: &Path, steps: &[StepRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    writeln!(f, "{}", log_header()).map_err(|e| Error::io(path, e))?;
    for s in steps {
        writeln!(f, "{}", log_line(s)).map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    if batch_size == 0 {
        0
    } else {
        n.div_ceil(batch_size)
    }
}

/// One optimization step on `batch`; returns the loss breakdown and the
/// learning rate used.
pub fn train_step(
    params: &mut ScorerParams,
    state: &mut AdamState,
    batch: &mut [BatchRecord],
    loss: &LossConfig,
    lambda_emb_now: f64,
    seed: u64,
) -> Result<(LossBreakdown, f64)> {
    forward(params, batch)?;
    let mut q = Vec::with_capacity(batch.len());
    let mut emb = Vec::with_capacity(batch.len());
    for r in batch.iter() {
        let o = r.output()?;
        q.push(o.score);
        emb.push(o.embedding_hat.clone());
    }
    let d: Vec<f64> = batch.iter().map(|r| r.severity).collect();
    let text: Vec<Vec<f64>> = batch.iter().map(|r| r.prompt_emb.clone()).collect();
    let inp = LossInputs {
        q: &q,
        d: &d,
        emb: &emb,
        text: &text,
        tau_emb: params.tau_emb(),
        tau_align: params.tau_align,
        text_proj: &params.text_proj,
    };
    let (b, g) = total_loss(&inp, loss, lambda_emb_now, seed)?;
    if !b.total.is_finite() {
        return Err(Error::Degenerate("non-finite training loss".into()));
    }
    let up = Upstream {
        dq: g.dq,
        d_emb_hat: g.d_emb,
        d_tau_emb: g.d_tau_emb,
        d_tau_align: g.d_tau_align,
        d_text_proj: Some(g.d_text_proj),
    };
    let grads = backward(params, batch, &up)?;
    let lr = adamw_step(params, &grads, state)?;
    if !params.is_finite() {
        return Err(Error::Degenerate("parameters became non-finite".into()));
    }
    Ok((b, lr))
}

/// Trains `params` on prepared records. The standardization buffers are
/// refitted on `data` first. `on_step` sees every step as it completes.
pub fn train(
    params: &mut ScorerParams,
    data: &[BatchRecord],
    s: &TrainSettings,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<(AdamState, Vec<StepRecord>)> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("no training records".into()));
    }
    if s.batch_size == 0 || s.epochs == 0 {
        return Err(Error::InvalidArgument("batch size and epochs must be at least 1".into()));
    }
    params.fit_standardization(data.iter().map(|r| &r.features));
    let spe = steps_per_epoch(data.len(), s.batch_size);
    let mut hyper = s.hyper;
    if hyper.total_steps == 0 {
        hyper.total_steps = (spe * s.epochs) as u64;
    }
    let mut state = AdamState::new(params, hyper);
    let severities: Vec<f64> = data.iter().map(|r| r.severity).collect();
    let mut log = Vec::with_capacity(spe * s.epochs);
    for epoch in 1..=s.epochs {
        let plan = epoch_plan(&severities, s.batch_size, s.master_seed, epoch as u64);
        for (i, idx) in plan.iter().enumerate() {
            let step = log.len();
            let mut batch: Vec<BatchRecord> = idx.iter().map(|&k| data[k].clone()).collect();
            let lam = lambda_emb_at(s.loss.lambda_emb, epoch, i, spe, s.epochs);
            let (breakdown, lr) = train_step(params, &mut state, &mut batch, &s.loss, lam, derive_seed(s.seed, step as u64))
                .map_err(|e| match e {
                    Error::Degenerate(m) => Error::Degenerate(format!("{m} at epoch {epoch}, step {step}")),
                    e => e,
                })?;
            let rec = StepRecord {
                epoch,
                step,
                batch: batch.len(),
                lr,
                breakdown,
            };
            on_step(&rec);
            log.push(rec);
        }
    }
    Ok((state, log))
}

/// Patch grid for an image of any size: square patches of side `patch`,
/// as many as fit, anchored at the top-left corner.
pub fn score_image(params: &ScorerParams, img: &Image, patch: usize) -> Result<(f64, Vec<f64>)> {
    if patch == 0 {
        return Err(Error::InvalidArgument("patch size must be at least 1".into()));
    }
    let (rows, cols) = (img.height() / patch, img.width() / patch);
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidArgument(format!(
            "image {}x{} is smaller than one {patch}px patch",
            img.width(),
            img.height()
        )));
    }
    let view = img.crop(0, 0, cols * patch, rows * patch)?;
    let grid = extract_patch_features(&view, rows, cols)?;
    crate::model::score_grid(params, &grid)
}
