//! Exhaustive-enumeration reference implementations of the pair-based losses,
//! written directly from their definitions and sharing no code with the crate.
#![allow(dead_code)]

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn bce(x: f64, y: f64) -> f64 {
    y * softplus(-x) + (1.0 - y) * softplus(x)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Every pair of index pairs `(i, j) < (k, l)` in lexicographic order, each
/// pair with `i < j` and gap above `t`, whose gaps differ. Yields
/// `(i, j, k, l, first_gap_larger)`.
fn combos(v: &[f64], t: f64) -> Vec<(usize, usize, usize, usize, bool)> {
    let n = v.len();
    let mut out = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            for k in 0..n {
                for l in k + 1..n {
                    if (k, l) <= (i, j) {
                        continue;
                    }
                    let ga = (v[i] - v[j]).abs();
                    let gb = (v[k] - v[l]).abs();
                    if ga > t && gb > t && ga != gb {
                        out.push((i, j, k, l, ga > gb));
                    }
                }
            }
        }
    }
    out
}

pub fn ranknet(q: &[f64], d: &[f64], t_d: f64) -> f64 {
    let cs = combos(d, t_d);
    if cs.is_empty() {
        return 0.0;
    }
    let sum: f64 = cs
        .iter()
        .map(|&(i, j, k, l, a_larger)| {
            let y = if a_larger { 1.0 } else { 0.0 };
            bce((q[i] - q[j]).abs(), y) + bce((q[k] - q[l]).abs(), 1.0 - y)
        })
        .sum();
    sum / (2 * cs.len()) as f64
}

pub fn mreg(q: &[f64], d: &[f64]) -> f64 {
    let n = q.len();
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                sum += softplus((q[i] - q[j]) * (d[i] - d[j]));
            }
        }
    }
    sum / (n * (n - 1)) as f64
}

pub fn edist(emb: &[Vec<f64>], q: &[f64], t_q: f64, tau: f64) -> f64 {
    let cs = combos(q, t_q);
    if cs.is_empty() {
        return 0.0;
    }
    let f = |a: usize, b: usize| (dot(&emb[a], &emb[b]) / tau).exp();
    let sum: f64 = cs
        .iter()
        .map(|&(i, j, k, l, a_larger)| {
            // the pair with the smaller score gap is the positive one
            let y = if a_larger { 0.0 } else { 1.0 };
            bce(f(i, j), y) + bce(f(k, l), 1.0 - y)
        })
        .sum();
    sum / (2 * cs.len()) as f64
}

pub fn pairwise(q: &[f64], d: &[f64], t_d: f64) -> f64 {
    let mut sum = 0.0;
    let mut count = 0;
    for i in 0..q.len() {
        for j in i + 1..q.len() {
            if (d[i] - d[j]).abs() > t_d {
                let y = if d[i] < d[j] { 1.0 } else { 0.0 };
                sum += bce(q[i] - q[j], y);
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

pub fn margin(q: &[f64], d: &[f64], t_d: f64, m: f64) -> f64 {
    let mut sum = 0.0;
    let mut count = 0;
    for i in 0..q.len() {
        for j in i + 1..q.len() {
            if (d[i] - d[j]).abs() > t_d {
                let s = if d[j] > d[i] { 1.0 } else { -1.0 };
                sum += (m - s * (q[i] - q[j])).max(0.0);
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Off-diagonal squared sample covariance over `D²`.
pub fn cov(emb: &[Vec<f64>]) -> f64 {
    let n = emb.len() as f64;
    let dim = emb[0].len();
    let mean: Vec<f64> = (0..dim).map(|k| emb.iter().map(|e| e[k]).sum::<f64>() / n).collect();
    let mut total = 0.0;
    for a in 0..dim {
        for b in 0..dim {
            if a != b {
                let s: f64 = emb.iter().map(|e| (e[a] - mean[a]) * (e[b] - mean[b])).sum::<f64>() / (n - 1.0);
                total += s * s;
            }
        }
    }
    total / (dim * dim) as f64
}

/// Symmetric InfoNCE with the logits written out in full.
pub fn align(emb: &[Vec<f64>], text: &[Vec<f64>], w: &[f64], bias: &[f64], tau_align: f64) -> f64 {
    let n = emb.len();
    let out = bias.len();
    let z: Vec<Vec<f64>> = emb
        .iter()
        .map(|e| {
            let v: Vec<f64> = (0..out).map(|o| bias[o] + dot(&w[o * e.len()..(o + 1) * e.len()], e)).collect();
            let nrm = dot(&v, &v).sqrt();
            v.iter().map(|x| x / nrm).collect()
        })
        .collect();
    let s = |i: usize, j: usize| tau_align.exp() * dot(&z[i], &text[j]);
    let mut total = 0.0;
    for i in 0..n {
        let row: f64 = (0..n).map(|j| s(i, j).exp()).sum();
        let col: f64 = (0..n).map(|j| s(j, i).exp()).sum();
        total += -(s(i, i).exp() / row).ln() - (s(i, i).exp() / col).ln();
    }
    total / (2 * n) as f64
}
