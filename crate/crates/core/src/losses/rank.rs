use super::pairs::{bce_logit, bce_logit_grad, build_combos, build_pairs, softplus, sigmoid, LabelRule, PairOfPairsSet};

/// A loss over scores and its gradient in `q`.
#[derive(Debug, Clone, PartialEq)]
pub struct QLoss {
    pub value: f64,
    pub dq: Vec<f64>,
    /// No pair (or combo) survived the threshold; value and gradient are zero.
    pub empty: bool,
}

impl QLoss {
    fn zero(n: usize) -> Self {
        Self {
            value: 0.0,
            dq: vec![0.0; n],
            empty: true,
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Pair-of-pairs set over severities: pairs with `Δd > t_d`, `y = 1` iff the
/// first pair has the larger severity gap.
pub fn ranking_combos(d: &[f64], t_d: f64, combo_cap: usize, seed: u64) -> PairOfPairsSet {
    build_combos(build_pairs(d, t_d), LabelRule::LargerGap, combo_cap, seed)
}

/// Mean over `2|S|` of `BCE(|Δq_a|, y) + BCE(|Δq_b|, 1 - y)`.
pub fn ranknet_with(q: &[f64], set: &PairOfPairsSet) -> QLoss {
    if set.is_empty() {
        return QLoss::zero(q.len());
    }
    let mut dq = vec![0.0; q.len()];
    let mut total = 0.0;
    let scale = 1.0 / (2 * set.combos.len()) as f64;
    for c in &set.combos {
        for (p, y) in [(set.pairs.pairs[c.a], c.y), (set.pairs.pairs[c.b], 1.0 - c.y)] {
            let diff = q[p.i] - q[p.j];
            let x = diff.abs();
            total += bce_logit(x, y);
            let g = bce_logit_grad(x, y) * sign(diff) * scale;
            dq[p.i] += g;
            dq[p.j] -= g;
        }
    }
    QLoss {
        value: total * scale,
        dq,
        empty: false,
    }
}

pub fn ranknet_loss(q: &[f64], d: &[f64], t_d: f64, combo_cap: usize, seed: u64) -> QLoss {
    ranknet_with(q, &ranking_combos(d, t_d, combo_cap, seed))
}

/// `softplus((q_i - q_j)(d_i - d_j))` averaged over the `N(N-1)` ordered pairs.
pub fn mreg_loss(q: &[f64], d: &[f64]) -> QLoss {
    let n = q.len();
    if n < 2 {
        return QLoss::zero(n);
    }
    let scale = 1.0 / (n * (n - 1)) as f64;
    let mut dq = vec![0.0; n];
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let dd = d[i] - d[j];
            let z = (q[i] - q[j]) * dd;
            // (i, j) and (j, i) contribute equally
            total += 2.0 * softplus(z);
            let g = 2.0 * sigmoid(z) * dd * scale;
            dq[i] += g;
            dq[j] -= g;
        }
    }
    QLoss {
        value: total * scale,
        dq,
        empty: false,
    }
}

fn combine(a: QLoss, b: QLoss, wb: f64) -> QLoss {
    QLoss {
        value: a.value + wb * b.value,
        dq: a.dq.iter().zip(&b.dq).map(|(x, y)| x + wb * y).collect(),
        empty: a.empty,
    }
}

/// `L_ranknet + λ_mreg · L_mreg`; `empty` refers to the ranknet combos.
pub fn ranking_loss(q: &[f64], d: &[f64], t_d: f64, lambda_mreg: f64, combo_cap: usize, seed: u64) -> QLoss {
    combine(ranknet_loss(q, d, t_d, combo_cap, seed), mreg_loss(q, d), lambda_mreg)
}

/// Plain pairwise RankNet: `BCE(q_i - q_j, [d_i < d_j])` over pairs with `Δd > t_d`.
pub fn pairwise_ranknet_loss(q: &[f64], d: &[f64], t_d: f64) -> QLoss {
    let pairs = build_pairs(d, t_d);
    if pairs.is_empty() {
        return QLoss::zero(q.len());
    }
    let scale = 1.0 / pairs.len() as f64;
    let mut dq = vec![0.0; q.len()];
    let mut total = 0.0;
    for p in &pairs.pairs {
        let y = if d[p.i] < d[p.j] { 1.0 } else { 0.0 };
        let x = q[p.i] - q[p.j];
        total += bce_logit(x, y);
        let g = bce_logit_grad(x, y) * scale;
        dq[p.i] += g;
        dq[p.j] -= g;
    }
    QLoss {
        value: total * scale,
        dq,
        empty: false,
    }
}

/// Margin ranking: `max(0, m - s (q_i - q_j))` with `s = sign(d_j - d_i)`,
/// over pairs with `Δd > t_d`. The hinge subgradient at the kink is 0.
pub fn margin_loss(q: &[f64], d: &[f64], t_d: f64, margin: f64) -> QLoss {
    let pairs = build_pairs(d, t_d);
    if pairs.is_empty() {
        return QLoss::zero(q.len());
    }
    let scale = 1.0 / pairs.len() as f64;
    let mut dq = vec![0.0; q.len()];
    let mut total = 0.0;
    for p in &pairs.pairs {
        let s = sign(d[p.j] - d[p.i]);
        let h = margin - s * (q[p.i] - q[p.j]);
        if h > 0.0 {
            total += h;
            dq[p.i] -= s * scale;
            dq[p.j] += s * scale;
        }
    }
    QLoss {
        value: total * scale,
        dq,
        empty: false,
    }
}

/// Ranking objective with a baseline in place of the pair-of-pairs term.
pub fn variant_ranking_loss(base: QLoss, q: &[f64], d: &[f64], lambda_mreg: f64) -> QLoss {
    combine(base, mreg_loss(q, d), lambda_mreg)
}
