//! Finite-difference verification of the analytic gradients.
//!
//! Pair-of-pairs sets are built once at the base point and held fixed while
//! parameters are perturbed, so every objective is a smooth function of the
//! parameters along each probe.

use super::{backward, forward, BatchRecord, Dims, Preset, ScorerParams, Upstream};
use crate::error::{Error, Result};
use crate::features::PatchFeatureGrid;
use crate::losses::{
    align_loss, cov_loss, edist_with, mreg_loss, ranknet_with, select, total_loss_with, LossConfig, LossInputs,
    Selection,
};
use crate::rng::{derive_seed, SplitMix64};

/// Relative errors use `max(|analytic|, |numeric|, REL_FLOOR)` as denominator.
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Final,
    RankNet,
    Mreg,
    Edist,
    Cov,
    Align,
}

impl Objective {
    pub const ALL: [Objective; 6] = [
        Objective::RankNet,
        Objective::Mreg,
        Objective::Edist,
        Objective::Cov,
        Objective::Align,
        Objective::Final,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Objective::Final => "final",
            Objective::RankNet => "ranknet",
            Objective::Mreg => "mreg",
            Objective::Edist => "edist",
            Objective::Cov => "cov",
            Objective::Align => "align",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// Parameter entry with the largest error, e.g. `enc1.w[17]`.
    pub worst: String,
    pub checked: usize,
    pub loss: f64,
}

fn upstream(
    params: &ScorerParams,
    batch: &[BatchRecord],
    cfg: &LossConfig,
    obj: Objective,
    sel: &Selection,
) -> Result<(f64, Upstream)> {
    let n = batch.len();
    let d = params.enc2.out;
    let mut q = Vec::with_capacity(n);
    let mut emb = Vec::with_capacity(n);
    for r in batch {
        let o = r.output()?;
        q.push(o.score);
        emb.push(o.embedding_hat.clone());
    }
    let sev: Vec<f64> = batch.iter().map(|r| r.severity).collect();
    let text: Vec<Vec<f64>> = batch.iter().map(|r| r.prompt_emb.clone()).collect();
    let mut up = Upstream::zeros(n, d);
    let value = match obj {
        Objective::RankNet => {
            let l = ranknet_with(&q, &sel.rank);
            up.dq = l.dq;
            l.value
        }
        Objective::Mreg => {
            let l = mreg_loss(&q, &sev);
            up.dq = l.dq;
            l.value
        }
        Objective::Edist => {
            let l = edist_with(&emb, params.tau_emb(), &sel.emb);
            up.d_emb_hat = l.d_emb;
            up.d_tau_emb = l.d_tau;
            l.value
        }
        Objective::Cov => {
            let (v, g) = cov_loss(&emb)?;
            up.d_emb_hat = g;
            v
        }
        Objective::Align => {
            let l = align_loss(&emb, &text, &params.text_proj, params.tau_align)?;
            up.d_emb_hat = l.d_emb;
            up.d_tau_align = l.d_tau_align;
            up.d_text_proj = Some(l.d_proj);
            l.value
        }
        Objective::Final => {
            let inp = LossInputs {
                q: &q,
                d: &sev,
                emb: &emb,
                text: &text,
                tau_emb: params.tau_emb(),
                tau_align: params.tau_align,
                text_proj: &params.text_proj,
            };
            let (b, g) = total_loss_with(&inp, cfg, cfg.lambda_emb, sel)?;
            up.dq = g.dq;
            up.d_emb_hat = g.d_emb;
            up.d_tau_emb = g.d_tau_emb;
            up.d_tau_align = g.d_tau_align;
            up.d_text_proj = Some(g.d_text_proj);
            b.total
        }
    };
    Ok((value, up))
}

fn objective_value(
    params: &ScorerParams,
    batch: &[BatchRecord],
    cfg: &LossConfig,
    obj: Objective,
    sel: &Selection,
) -> Result<f64> {
    let mut b = batch.to_vec();
    forward(params, &mut b)?;
    Ok(upstream(params, &b, cfg, obj, sel)?.0)
}

/// Objective value and its analytic parameter gradient at `params`.
pub fn analytic_gradient(
    params: &ScorerParams,
    batch: &[BatchRecord],
    cfg: &LossConfig,
    obj: Objective,
    sel: &Selection,
) -> Result<(f64, ScorerParams)> {
    let mut b = batch.to_vec();
    forward(params, &mut b)?;
    let (v, up) = upstream(params, &b, cfg, obj, sel)?;
    Ok((v, backward(params, &b, &up)?))
}

/// Compares `analytic` against central differences over every trainable entry.
pub fn numeric_check(
    params: &ScorerParams,
    batch: &[BatchRecord],
    cfg: &LossConfig,
    obj: Objective,
    sel: &Selection,
    analytic: &ScorerParams,
    eps: f64,
) -> Result<GradCheck> {
    let names: Vec<(&'static str, usize)> = params.trainable().iter().map(|(n, t)| (*n, t.len())).collect();
    let grads = analytic.trainable();
    let mut probe = params.clone();
    let mut out = GradCheck {
        max_rel_err: 0.0,
        worst: String::new(),
        checked: 0,
        loss: objective_value(params, batch, cfg, obj, sel)?,
    };
    for (t, (name, len)) in names.iter().enumerate() {
        for k in 0..*len {
            let base = params.trainable()[t].1[k];
            probe.trainable_mut()[t].1[k] = base + eps;
            let plus = objective_value(&probe, batch, cfg, obj, sel)?;
            probe.trainable_mut()[t].1[k] = base - eps;
            let minus = objective_value(&probe, batch, cfg, obj, sel)?;
            probe.trainable_mut()[t].1[k] = base;
            let num = (plus - minus) / (2.0 * eps);
            let ana = grads[t].1[k];
            let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(REL_FLOOR);
            if !rel.is_finite() {
                return Err(Error::Degenerate(format!("non-finite gradient at {name}[{k}]")));
            }
            if rel > out.max_rel_err || out.worst.is_empty() {
                out.max_rel_err = rel;
                out.worst = format!("{name}[{k}]");
            }
            out.checked += 1;
        }
    }
    Ok(out)
}

/// Worst relative error between analytic and central-difference gradients of
/// `obj` over every trainable parameter.
pub fn grad_check(
    params: &ScorerParams,
    batch: &[BatchRecord],
    eps: f64,
    cfg: &LossConfig,
    obj: Objective,
    seed: u64,
) -> Result<GradCheck> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("gradient check needs a nonempty batch".into()));
    }
    let mut b = batch.to_vec();
    forward(params, &mut b)?;
    let q: Vec<f64> = b.iter().map(|r| r.output().map(|o| o.score)).collect::<Result<_>>()?;
    let d: Vec<f64> = b.iter().map(|r| r.severity).collect();
    let sel = select(&q, &d, cfg, seed);
    let (_, analytic) = analytic_gradient(params, batch, cfg, obj, &sel)?;
    numeric_check(params, batch, cfg, obj, &sel, &analytic, eps)
}

/// Parameters with every tensor drawn at random, including the
/// zero-initialized attention query and decision layer, so that every
/// gradient path is exercised.
pub fn random_params(preset: Preset, dims: Dims, seed: u64) -> ScorerParams {
    let mut p = ScorerParams::new(preset, dims, seed);
    let mut r = SplitMix64::new(derive_seed(seed, 10));
    for v in p.attn_query.iter_mut() {
        *v = 2.0 * r.next_f64() - 1.0;
    }
    // wide enough that scores spread past the T_q threshold
    for v in p.decision.w.iter_mut() {
        *v = 8.0 * (r.next_f64() - 0.5);
    }
    p.decision.b[0] = r.next_f64() - 0.5;
    for v in p.enc1.b.iter_mut().chain(p.enc2.b.iter_mut()).chain(p.text_proj.b.iter_mut()) {
        *v = 0.2 * (r.next_f64() - 0.5);
    }
    p.log_tau_emb = r.next_f64() - 0.5;
    p.tau_align = 0.5 + 2.0 * r.next_f64();
    p
}

/// Records with random features, uniform severities and unit prompt vectors.
pub fn random_batch(dims: Dims, n: usize, patches: usize, seed: u64) -> Vec<BatchRecord> {
    let mut r = SplitMix64::new(seed);
    (0..n)
        .map(|i| {
            // a per-record offset keeps records (and their scores) apart
            let base: Vec<f64> = (0..dims.k).map(|_| 1.5 * r.normal()).collect();
            let data = (0..patches * dims.k).map(|j| base[j % dims.k] + 0.3 * r.normal()).collect();
            let grid = PatchFeatureGrid::new(1, patches, dims.k, data).expect("sized grid");
            let mut t: Vec<f64> = (0..dims.d_text).map(|_| r.normal()).collect();
            let nrm = t.iter().map(|v| v * v).sum::<f64>().sqrt();
            t.iter_mut().for_each(|v| *v /= nrm);
            BatchRecord::new(format!("r{i}"), grid, r.next_f64(), t)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> Dims {
        Dims {
            k: crate::features::FEATURE_DIM,
            h: 10,
            d: 6,
            d_text: 8,
        }
    }

    #[test]
    fn every_objective_passes() {
        let cfg = LossConfig::default();
        for seed in 0..3 {
            let p = random_params(Preset::Custom, dims(), seed);
            let b = random_batch(dims(), 4, 4, seed + 100);
            for obj in Objective::ALL {
                let r = grad_check(&p, &b, 1e-4, &cfg, obj, seed).unwrap();
                println!("seed {seed} {:8} err {:.3e} at {} loss {:.6}", obj.as_str(), r.max_rel_err, r.worst, r.loss);
                assert!(r.max_rel_err < 1e-4, "{} seed {seed}: {r:?}", obj.as_str());
            }
        }
    }

    #[test]
    fn corrupted_decision_gradient_is_caught() {
        let cfg = LossConfig::default();
        let p = random_params(Preset::Custom, dims(), 4);
        let b = random_batch(dims(), 4, 4, 5);
        let mut fb = b.clone();
        forward(&p, &mut fb).unwrap();
        let q: Vec<f64> = fb.iter().map(|r| r.out.as_ref().unwrap().score).collect();
        let d: Vec<f64> = b.iter().map(|r| r.severity).collect();
        let sel = select(&q, &d, &cfg, 4);
        let (_, mut g) = analytic_gradient(&p, &b, &cfg, Objective::Final, &sel).unwrap();
        g.decision.w[0] = 1.5 * g.decision.w[0] + 1e-3;
        let r = numeric_check(&p, &b, &cfg, Objective::Final, &sel, &g, 1e-4).unwrap();
        assert!(r.max_rel_err > 1e-2);
        assert_eq!(r.worst, "decision.w[0]");
    }

    #[test]
    fn single_record_batch_checks_active_terms() {
        let cfg = LossConfig::default();
        let p = random_params(Preset::Custom, dims(), 6);
        let b = random_batch(dims(), 1, 4, 7);
        let r = grad_check(&p, &b, 1e-4, &cfg, Objective::Final, 6).unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }
}
