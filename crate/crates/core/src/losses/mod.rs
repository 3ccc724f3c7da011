//! Training objectives with analytic gradients in their inputs.
//!
//! The composite is `λ_rank · L_ranking + λ_align · L_align + λ_emb · L_embdist`
//! where `L_ranking = L_ranknet + λ_mreg · L_mreg` and
//! `L_embdist = L_edist + λ_cov · L_cov`.

mod align;
mod embed;
mod pairs;
mod rank;

pub use align::{align_loss, AlignLoss};
pub use embed::{cov_loss, edist_loss, edist_with, embdist_loss, embdist_with, embedding_combos, EmbLoss};
pub use pairs::{
    bce_logit, bce_logit_grad, build_combos, build_pairs, sigmoid, softplus, Combo, LabelRule, Pair,
    PairOfPairsSet, PairSet,
};
pub use rank::{
    margin_loss, mreg_loss, pairwise_ranknet_loss, ranking_combos, ranking_loss, ranknet_loss, ranknet_with,
    variant_ranking_loss, QLoss,
};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::Affine;
use crate::rng::derive_seed;

/// Term replacing the pair-of-pairs RankNet loss inside `L_ranking`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RankingVariant {
    #[default]
    PairOfPairs,
    Pairwise,
    Margin,
}

impl std::str::FromStr for RankingVariant {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pair-of-pairs" => Ok(Self::PairOfPairs),
            "pairwise" => Ok(Self::Pairwise),
            "margin" => Ok(Self::Margin),
            _ => Err(crate::Error::Config(format!("unknown ranking variant `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_rank: f64,
    pub lambda_mreg: f64,
    pub lambda_align: f64,
    /// Final value reached by the embedding-distance ramp.
    pub lambda_emb: f64,
    pub lambda_cov: f64,
    pub t_d: f64,
    pub t_q: f64,
    pub combo_cap: usize,
    pub ranking: RankingVariant,
    /// Margin of the hinge baseline.
    pub margin: f64,
    pub align: bool,
    pub embdist: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_rank: 1.0,
            lambda_mreg: 0.1,
            lambda_align: 0.3,
            lambda_emb: 0.5,
            lambda_cov: 0.01,
            t_d: 0.1,
            t_q: 0.05,
            combo_cap: 512,
            ranking: RankingVariant::PairOfPairs,
            margin: 0.1,
            align: true,
            embdist: true,
        }
    }
}

/// `λ_emb` in effect at a step: 0 throughout epoch 1, then a linear per-step
/// ramp reaching `final_value` on the last step of training. `epoch` is
/// 1-based, `step` counts from 0 within the epoch.
pub fn lambda_emb_at(final_value: f64, epoch: usize, step: usize, steps_per_epoch: usize, epochs: usize) -> f64 {
    if epoch <= 1 || epochs <= 1 || steps_per_epoch == 0 {
        return 0.0;
    }
    let done = ((epoch - 2) * steps_per_epoch + step + 1) as f64;
    let total = ((epochs - 1) * steps_per_epoch) as f64;
    final_value * (done / total).min(1.0)
}

/// Weights applied to each term, after ablation switches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub lambda_rank: f64,
    pub lambda_mreg: f64,
    pub lambda_align: f64,
    pub lambda_emb: f64,
    pub lambda_cov: f64,
}

impl Weights {
    pub fn effective(cfg: &LossConfig, lambda_emb_now: f64) -> Self {
        Self {
            lambda_rank: cfg.lambda_rank,
            lambda_mreg: cfg.lambda_mreg,
            lambda_align: if cfg.align { cfg.lambda_align } else { 0.0 },
            lambda_emb: if cfg.embdist { lambda_emb_now } else { 0.0 },
            lambda_cov: cfg.lambda_cov,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ranknet: f64,
    pub mreg: f64,
    pub ranking: f64,
    pub edist: f64,
    pub cov: f64,
    pub embdist: f64,
    pub align: f64,
    pub total: f64,
    pub weights: Weights,
    pub rank_empty: bool,
    pub emb_empty: bool,
}

impl LossBreakdown {
    pub const CSV_COLUMNS: [&'static str; 13] = [
        "ranknet",
        "mreg",
        "ranking",
        "edist",
        "cov",
        "embdist",
        "align",
        "total",
        "lambda_rank",
        "lambda_mreg",
        "lambda_align",
        "lambda_emb",
        "lambda_cov",
    ];

    pub fn csv_values(&self) -> [f64; 13] {
        let w = &self.weights;
        [
            self.ranknet,
            self.mreg,
            self.ranking,
            self.edist,
            self.cov,
            self.embdist,
            self.align,
            self.total,
            w.lambda_rank,
            w.lambda_mreg,
            w.lambda_align,
            w.lambda_emb,
            w.lambda_cov,
        ]
    }

    pub fn recomputed_total(&self) -> f64 {
        let w = &self.weights;
        w.lambda_rank * self.ranking + w.lambda_align * self.align + w.lambda_emb * self.embdist
    }
}

/// Gradients of the composite with respect to everything it reads.
#[derive(Debug, Clone, PartialEq)]
pub struct TotalGrads {
    pub dq: Vec<f64>,
    pub d_emb: Vec<Vec<f64>>,
    pub d_tau_emb: f64,
    pub d_tau_align: f64,
    pub d_text_proj: Affine,
}

/// Everything the composite reads from a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct LossInputs<'a> {
    pub q: &'a [f64],
    pub d: &'a [f64],
    /// Normalized image embeddings `F̂`.
    pub emb: &'a [Vec<f64>],
    /// Unit prompt embeddings.
    pub text: &'a [Vec<f64>],
    pub tau_emb: f64,
    pub tau_align: f64,
    pub text_proj: &'a Affine,
}

/// Pair-of-pairs sets of one evaluation. Fixing them makes the composite a
/// smooth function of its inputs, which finite-difference checks rely on.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub rank: PairOfPairsSet,
    pub emb: PairOfPairsSet,
}

pub fn select(q: &[f64], d: &[f64], cfg: &LossConfig, seed: u64) -> Selection {
    Selection {
        rank: ranking_combos(d, cfg.t_d, cfg.combo_cap, derive_seed(seed, 0)),
        emb: embedding_combos(q, cfg.t_q, cfg.combo_cap, derive_seed(seed, 1)),
    }
}

pub fn total_loss(
    inp: &LossInputs<'_>,
    cfg: &LossConfig,
    lambda_emb_now: f64,
    seed: u64,
) -> Result<(LossBreakdown, TotalGrads)> {
    let sel = select(inp.q, inp.d, cfg, seed);
    total_loss_with(inp, cfg, lambda_emb_now, &sel)
}

pub fn total_loss_with(
    inp: &LossInputs<'_>,
    cfg: &LossConfig,
    lambda_emb_now: f64,
    sel: &Selection,
) -> Result<(LossBreakdown, TotalGrads)> {
    let w = Weights::effective(cfg, lambda_emb_now);
    let n = inp.q.len();

    let head = match cfg.ranking {
        RankingVariant::PairOfPairs => ranknet_with(inp.q, &sel.rank),
        RankingVariant::Pairwise => pairwise_ranknet_loss(inp.q, inp.d, cfg.t_d),
        RankingVariant::Margin => margin_loss(inp.q, inp.d, cfg.t_d, cfg.margin),
    };
    let mreg = mreg_loss(inp.q, inp.d);
    let edist = edist_with(inp.emb, inp.tau_emb, &sel.emb);
    let (cov, d_cov) = if n >= 2 {
        cov_loss(inp.emb)?
    } else {
        (0.0, inp.emb.iter().map(|e| vec![0.0; e.len()]).collect())
    };
    let align = align_loss(inp.emb, inp.text, inp.text_proj, inp.tau_align)?;

    let ranking = head.value + w.lambda_mreg * mreg.value;
    let embdist = edist.value + w.lambda_cov * cov;
    let mut b = LossBreakdown {
        ranknet: head.value,
        mreg: mreg.value,
        ranking,
        edist: edist.value,
        cov,
        embdist,
        align: align.value,
        total: 0.0,
        weights: w,
        rank_empty: head.empty,
        emb_empty: edist.empty,
    };
    b.total = b.recomputed_total();

    let dq = (0..n)
        .map(|i| w.lambda_rank * (head.dq[i] + w.lambda_mreg * mreg.dq[i]))
        .collect();
    let d_emb = (0..n)
        .map(|i| {
            (0..inp.emb[i].len())
                .map(|k| {
                    w.lambda_emb * (edist.d_emb[i][k] + w.lambda_cov * d_cov[i][k])
                        + w.lambda_align * align.d_emb[i][k]
                })
                .collect()
        })
        .collect();
    let mut d_text_proj = align.d_proj;
    d_text_proj.scale(w.lambda_align);
    let grads = TotalGrads {
        dq,
        d_emb,
        d_tau_emb: w.lambda_emb * edist.d_tau,
        d_tau_align: w.lambda_align * align.d_tau_align,
        d_text_proj,
    };
    Ok((b, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_is_zero_then_strictly_increasing() {
        let spe = 7;
        let mut prev = -1.0;
        for epoch in 1..=3 {
            for step in 0..spe {
                let l = lambda_emb_at(0.5, epoch, step, spe, 3);
                if epoch == 1 {
                    assert_eq!(l, 0.0);
                } else {
                    assert!(l > prev);
                    prev = l;
                }
            }
        }
        assert!((prev - 0.5).abs() < 1e-15);
    }

    fn fixture() -> (Vec<f64>, Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>, Affine) {
        let q = vec![0.2, 0.8, 0.5, 0.35];
        let d = vec![0.9, 0.0, 0.4, 0.7];
        let emb = vec![vec![0.6, 0.8], vec![1.0, 0.0], vec![0.0, 1.0], vec![-0.6, 0.8]];
        let text = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0], vec![0.6, 0.0, 0.8]];
        let mut p = Affine::zeros(3, 2);
        p.w.copy_from_slice(&[0.3, -0.2, 0.5, 0.1, -0.4, 0.7]);
        p.b.copy_from_slice(&[0.05, 0.0, -0.1]);
        (q, d, emb, text, p)
    }

    #[test]
    fn first_epoch_weight_is_zero_and_total_recomputes() {
        let (q, d, emb, text, p) = fixture();
        let inp = LossInputs {
            q: &q,
            d: &d,
            emb: &emb,
            text: &text,
            tau_emb: 1.0,
            tau_align: 1.0,
            text_proj: &p,
        };
        let cfg = LossConfig::default();
        let (b, _) = total_loss(&inp, &cfg, lambda_emb_at(cfg.lambda_emb, 1, 0, 10, 3), 5).unwrap();
        assert_eq!(b.weights.lambda_emb, 0.0);
        assert!((b.total - b.recomputed_total()).abs() < 1e-15);
        assert!(b.embdist > 0.0);
    }

    #[test]
    fn align_and_emb_off_leaves_ranking() {
        let (q, d, emb, text, p) = fixture();
        let inp = LossInputs {
            q: &q,
            d: &d,
            emb: &emb,
            text: &text,
            tau_emb: 0.5,
            tau_align: 2.0,
            text_proj: &p,
        };
        let cfg = LossConfig {
            lambda_rank: 1.5,
            align: false,
            embdist: false,
            ..LossConfig::default()
        };
        let (b, g) = total_loss(&inp, &cfg, 0.5, 5).unwrap();
        assert_eq!(b.total, 1.5 * b.ranking);
        assert!(g.d_emb.iter().flatten().all(|&x| x == 0.0));
        assert_eq!(g.d_tau_align, 0.0);
    }
}
