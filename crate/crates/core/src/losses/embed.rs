use super::pairs::{bce_logit, bce_logit_grad, build_combos, build_pairs, LabelRule, PairOfPairsSet};
use crate::error::{Error, Result};

/// A loss over normalized embeddings with gradients in `F̂` and `τ_emb`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbLoss {
    pub value: f64,
    pub d_emb: Vec<Vec<f64>>,
    pub d_tau: f64,
    pub empty: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn zeros_like(emb: &[Vec<f64>]) -> Vec<Vec<f64>> {
    emb.iter().map(|e| vec![0.0; e.len()]).collect()
}

/// Pair-of-pairs set over scores: pairs with `Δq > t_q`, `y = 1` iff the
/// first pair has the smaller score gap.
pub fn embedding_combos(q: &[f64], t_q: f64, combo_cap: usize, seed: u64) -> PairOfPairsSet {
    build_combos(build_pairs(q, t_q), LabelRule::SmallerGap, combo_cap, seed)
}

/// BCE on `Δf = exp(F̂_i·F̂_j / τ)` over a prebuilt combo set.
pub fn edist_with(emb: &[Vec<f64>], tau: f64, set: &PairOfPairsSet) -> EmbLoss {
    let mut d_emb = zeros_like(emb);
    if set.is_empty() {
        return EmbLoss {
            value: 0.0,
            d_emb,
            d_tau: 0.0,
            empty: true,
        };
    }
    let scale = 1.0 / (2 * set.combos.len()) as f64;
    let mut total = 0.0;
    let mut d_tau = 0.0;
    for c in &set.combos {
        for (p, y) in [(set.pairs.pairs[c.a], c.y), (set.pairs.pairs[c.b], 1.0 - c.y)] {
            let s = dot(&emb[p.i], &emb[p.j]);
            let f = (s / tau).exp();
            total += bce_logit(f, y);
            let g = bce_logit_grad(f, y) * scale;
            let gs = g * f / tau;
            d_tau -= g * f * s / (tau * tau);
            for k in 0..emb[p.i].len() {
                d_emb[p.i][k] += gs * emb[p.j][k];
                d_emb[p.j][k] += gs * emb[p.i][k];
            }
        }
    }
    EmbLoss {
        value: total * scale,
        d_emb,
        d_tau,
        empty: false,
    }
}

pub fn edist_loss(emb: &[Vec<f64>], q: &[f64], t_q: f64, tau: f64, combo_cap: usize, seed: u64) -> EmbLoss {
    edist_with(emb, tau, &embedding_combos(q, t_q, combo_cap, seed))
}

/// `(1/D²) Σ_{a≠b} Σ_ab²` for the sample covariance `Σ` of the rows of `emb`.
pub fn cov_loss(emb: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)> {
    let n = emb.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("covariance needs 2 rows, got {n}")));
    }
    let dim = emb[0].len();
    let mut mean = vec![0.0; dim];
    for e in emb {
        for (m, v) in mean.iter_mut().zip(e) {
            *m += v / n as f64;
        }
    }
    let centered: Vec<Vec<f64>> = emb
        .iter()
        .map(|e| e.iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();
    let denom = (n - 1) as f64;
    let mut sigma = vec![0.0; dim * dim];
    for a in 0..dim {
        for b in a..dim {
            let s = centered.iter().map(|c| c[a] * c[b]).sum::<f64>() / denom;
            sigma[a * dim + b] = s;
            sigma[b * dim + a] = s;
        }
    }
    let d2 = (dim * dim) as f64;
    let mut value = 0.0;
    for a in 0..dim {
        for b in 0..dim {
            if a != b {
                value += sigma[a * dim + b].powi(2);
            }
        }
    }
    // dL/dC = 2 C G / (N-1) with G_ab = 2 Σ_ab / D² off the diagonal; the
    // centering Jacobian vanishes because the columns of C sum to zero.
    let mut grad = vec![vec![0.0; dim]; n];
    for (g, c) in grad.iter_mut().zip(&centered) {
        for b in 0..dim {
            let mut acc = 0.0;
            for a in 0..dim {
                if a != b {
                    acc += c[a] * sigma[a * dim + b];
                }
            }
            g[b] = 4.0 * acc / (denom * d2);
        }
    }
    Ok((value / d2, grad))
}

/// `L_edist + λ_cov · L_cov`; `empty` refers to the edist combos.
pub fn embdist_with(emb: &[Vec<f64>], tau: f64, lambda_cov: f64, set: &PairOfPairsSet) -> Result<EmbLoss> {
    let mut out = edist_with(emb, tau, set);
    let (cov, d_cov) = cov_loss(emb)?;
    out.value += lambda_cov * cov;
    for (g, dc) in out.d_emb.iter_mut().zip(&d_cov) {
        for (x, y) in g.iter_mut().zip(dc) {
            *x += lambda_cov * y;
        }
    }
    Ok(out)
}

pub fn embdist_loss(
    emb: &[Vec<f64>],
    q: &[f64],
    t_q: f64,
    tau: f64,
    lambda_cov: f64,
    combo_cap: usize,
    seed: u64,
) -> Result<EmbLoss> {
    embdist_with(emb, tau, lambda_cov, &embedding_combos(q, t_q, combo_cap, seed))
}
