use crate::rng::SplitMix64;

/// Index pair `i < j` with its gap `|v_i - v_j|`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pair {
    pub i: usize,
    pub j: usize,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairSet {
    pub pairs: Vec<Pair>,
    pub threshold: f64,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// All `(i, j)`, `i < j`, with `|v_i - v_j| > threshold`, in lexicographic order.
pub fn build_pairs(values: &[f64], threshold: f64) -> PairSet {
    let mut pairs = Vec::new();
    for i in 0..values.len() {
        for j in i + 1..values.len() {
            let gap = (values[i] - values[j]).abs();
            if gap > threshold {
                pairs.push(Pair { i, j, gap });
            }
        }
    }
    PairSet { pairs, threshold }
}

/// Which pair of a combo is labelled positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelRule {
    /// `y = 1` iff the first pair has the larger gap (ranking).
    LargerGap,
    /// `y = 1` iff the first pair has the smaller gap (embedding distance).
    SmallerGap,
}

/// Two pairs (indices into a [`PairSet`]) compared by gap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Combo {
    pub a: usize,
    pub b: usize,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairOfPairsSet {
    pub pairs: PairSet,
    pub combos: Vec<Combo>,
    /// Number of labelled combos before subsampling.
    pub sampled_from: usize,
    pub sample_seed: u64,
}

impl PairOfPairsSet {
    pub fn is_empty(&self) -> bool {
        self.combos.is_empty()
    }

    /// Recomputes the label of `c` from the stored gaps; `None` for a tie.
    pub fn label_of(&self, c: &Combo, rule: LabelRule) -> Option<f64> {
        label(self.pairs.pairs[c.a].gap, self.pairs.pairs[c.b].gap, rule)
    }
}

fn label(ga: f64, gb: f64, rule: LabelRule) -> Option<f64> {
    if ga == gb {
        return None;
    }
    let first_wins = match rule {
        LabelRule::LargerGap => ga > gb,
        LabelRule::SmallerGap => ga < gb,
    };
    Some(if first_wins { 1.0 } else { 0.0 })
}

/// Every unordered combo of distinct pairs with unequal gaps. If more than
/// `cap` exist, `cap` of them are drawn uniformly without replacement using
/// `seed` and kept in enumeration order.
pub fn build_combos(pairs: PairSet, rule: LabelRule, cap: usize, seed: u64) -> PairOfPairsSet {
    let mut combos = Vec::new();
    for a in 0..pairs.len() {
        for b in a + 1..pairs.len() {
            if let Some(y) = label(pairs.pairs[a].gap, pairs.pairs[b].gap, rule) {
                combos.push(Combo { a, b, y });
            }
        }
    }
    let sampled_from = combos.len();
    if combos.len() > cap {
        let mut idx: Vec<usize> = (0..combos.len()).collect();
        let mut rng = SplitMix64::new(seed);
        for t in 0..cap {
            let r = t + rng.below((idx.len() - t) as u64) as usize;
            idx.swap(t, r);
        }
        idx.truncate(cap);
        idx.sort_unstable();
        combos = idx.into_iter().map(|k| combos[k]).collect();
    }
    PairOfPairsSet {
        pairs,
        combos,
        sampled_from,
        sample_seed: seed,
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of logit `x` against label `y`.
pub fn bce_logit(x: f64, y: f64) -> f64 {
    y * softplus(-x) + (1.0 - y) * softplus(x)
}

/// Derivative of [`bce_logit`] in `x`.
pub fn bce_logit_grad(x: f64, y: f64) -> f64 {
    sigmoid(x) - y
}
