use crate::error::{Error, Result};
use crate::model::Affine;

#[derive(Debug, Clone, PartialEq)]
pub struct AlignLoss {
    pub value: f64,
    pub d_emb: Vec<Vec<f64>>,
    pub d_proj: Affine,
    pub d_tau_align: f64,
}

fn log_softmax_diag_grad(logits: &[f64], target: usize, out: &mut [f64], scale: f64) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    for (k, (o, l)) in out.iter_mut().zip(logits).enumerate() {
        let p = (l - m).exp() / z;
        *o += scale * (p - if k == target { 1.0 } else { 0.0 });
    }
    m + z.ln() - logits[target]
}

/// Symmetric InfoNCE between projected image embeddings and text embeddings.
///
/// `ẑ_i = normalize(P F̂_i + c)`, `s_ij = e^{τ_align} ẑ_i·t_j`, and the loss is
/// the mean of the row-wise and column-wise cross-entropies with matched
/// pairs on the diagonal.
pub fn align_loss(emb: &[Vec<f64>], text: &[Vec<f64>], proj: &Affine, tau_align: f64) -> Result<AlignLoss> {
    let n = emb.len();
    if n == 0 || text.len() != n {
        return Err(Error::Shape(format!("{n} image rows vs {} text rows", text.len())));
    }
    if text.iter().any(|t| t.len() != proj.out) || emb.iter().any(|e| e.len() != proj.inp) {
        return Err(Error::Shape(format!(
            "projection {}x{} does not fit image width {} / text width {}",
            proj.out,
            proj.inp,
            emb[0].len(),
            text[0].len()
        )));
    }
    let scale = tau_align.exp();
    let z: Vec<Vec<f64>> = emb.iter().map(|e| proj.apply(e)).collect();
    let norms: Vec<f64> = z.iter().map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12)).collect();
    let zh: Vec<Vec<f64>> = z.iter().zip(&norms).map(|(v, &nm)| v.iter().map(|x| x / nm).collect()).collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let s: Vec<Vec<f64>> = zh.iter().map(|zi| text.iter().map(|t| scale * dot(zi, t)).collect()).collect();

    let w = 1.0 / (2 * n) as f64;
    let mut gs = vec![vec![0.0; n]; n];
    let mut value = 0.0;
    for i in 0..n {
        value += log_softmax_diag_grad(&s[i], i, &mut gs[i], w);
    }
    let mut col_g = vec![0.0; n];
    for j in 0..n {
        let col: Vec<f64> = (0..n).map(|i| s[i][j]).collect();
        col_g.iter_mut().for_each(|g| *g = 0.0);
        value += log_softmax_diag_grad(&col, j, &mut col_g, w);
        for i in 0..n {
            gs[i][j] += col_g[i];
        }
    }
    value *= w;

    let mut d_tau_align = 0.0;
    let mut d_proj = Affine::zeros(proj.out, proj.inp);
    let mut d_emb = Vec::with_capacity(n);
    for i in 0..n {
        let mut g_zh = vec![0.0; proj.out];
        for j in 0..n {
            d_tau_align += gs[i][j] * s[i][j];
            for (g, t) in g_zh.iter_mut().zip(&text[j]) {
                *g += scale * gs[i][j] * t;
            }
        }
        let proj_g = dot(&zh[i], &g_zh);
        let g_z: Vec<f64> = g_zh.iter().zip(&zh[i]).map(|(g, h)| (g - h * proj_g) / norms[i]).collect();
        d_proj.accumulate_outer(&g_z, &emb[i]);
        d_emb.push(proj.apply_transpose(&g_z));
    }
    Ok(AlignLoss {
        value,
        d_emb,
        d_proj,
        d_tau_align,
    })
}
