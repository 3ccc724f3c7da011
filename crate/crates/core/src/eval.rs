//! Correlation metrics, score-distribution overlap and result export.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BINS: usize = 50;

fn check_lengths(pred: &[f64], reference: &[f64]) -> Result<()> {
    if pred.len() != reference.len() {
        return Err(Error::InvalidArgument(format!(
            "prediction and reference lengths differ ({} vs {})",
            pred.len(),
            reference.len()
        )));
    }
    if pred.len() < 3 {
        return Err(Error::InvalidArgument(format!("need at least 3 samples, got {}", pred.len())));
    }
    if pred.iter().chain(reference).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("scores must be finite".into()));
    }
    Ok(())
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("correlation of a constant series is undefined".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson linear correlation coefficient.
pub fn plcc(pred: &[f64], reference: &[f64]) -> Result<f64> {
    check_lengths(pred, reference)?;
    pearson(pred, reference)
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && v[idx[j]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j + 1) as f64 / 2.0;
        for &k in &idx[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

fn has_ties(ranks: &[f64]) -> bool {
    ranks.iter().any(|r| r.fract() != 0.0) || {
        let mut s = ranks.to_vec();
        s.sort_by(f64::total_cmp);
        s.windows(2).any(|w| w[0] == w[1])
    }
}

/// Spearman rank correlation. Without ties this is `1 - 6 Σ d² / (N (N² - 1))`;
/// with ties it is the Pearson correlation of average ranks.
pub fn srocc(pred: &[f64], reference: &[f64]) -> Result<f64> {
    check_lengths(pred, reference)?;
    let rp = average_ranks(pred);
    let rr = average_ranks(reference);
    if has_ties(&rp) || has_ties(&rr) {
        return pearson(&rp, &rr);
    }
    let n = pred.len() as f64;
    let d2: f64 = rp.iter().zip(&rr).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(1.0 - 6.0 * d2 / (n * (n * n - 1.0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramSpec {
    pub bins: usize,
    pub lo: f64,
    pub hi: f64,
}

impl HistogramSpec {
    pub fn bin_of(&self, v: f64) -> usize {
        if self.hi <= self.lo {
            return 0;
        }
        let b = ((v - self.lo) / (self.hi - self.lo) * self.bins as f64).floor();
        (b.max(0.0) as usize).min(self.bins - 1)
    }

    /// Normalized histogram of `values` (masses sum to 1).
    pub fn masses(&self, values: &[f64]) -> Vec<f64> {
        let mut h = vec![0.0; self.bins];
        for &v in values {
            h[self.bin_of(v)] += 1.0;
        }
        let n = values.len() as f64;
        h.iter_mut().for_each(|m| *m /= n);
        h
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Overlap {
    pub fraction: f64,
    pub spec: HistogramSpec,
    pub high: Vec<f64>,
    pub low: Vec<f64>,
}

/// Histogram intersection `Σ_b min(h_high(b), h_low(b))` over `bins` equal
/// bins spanning the pooled range of both sets.
pub fn overlap(high: &[f64], low: &[f64], bins: usize) -> Result<Overlap> {
    if high.is_empty() || low.is_empty() {
        return Err(Error::InvalidArgument("overlap needs two nonempty score sets".into()));
    }
    if bins < 2 {
        return Err(Error::InvalidArgument(format!("bins must be at least 2, got {bins}")));
    }
    if high.iter().chain(low).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("scores must be finite".into()));
    }
    let lo = high.iter().chain(low).copied().fold(f64::INFINITY, f64::min);
    let hi = high.iter().chain(low).copied().fold(f64::NEG_INFINITY, f64::max);
    let spec = HistogramSpec { bins, lo, hi };
    let (h, l) = (spec.masses(high), spec.masses(low));
    let fraction = h.iter().zip(&l).map(|(a, b)| a.min(*b)).sum::<f64>().clamp(0.0, 1.0);
    Ok(Overlap {
        fraction,
        spec,
        high: h,
        low: l,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub name: String,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl ScoreSummary {
    pub fn of(name: &str, v: &[f64]) -> Self {
        let n = v.len();
        let mean = if n == 0 { 0.0 } else { v.iter().sum::<f64>() / n as f64 };
        let var = if n == 0 { 0.0 } else { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64 };
        Self {
            name: name.into(),
            n,
            mean,
            std: var.sqrt(),
            min: v.iter().copied().fold(f64::INFINITY, f64::min),
            max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// JSON document written as `report.json`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub srocc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plcc: Option<f64>,
    pub sets: Vec<ScoreSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overlap_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub histogram: Option<HistogramSpec>,
    #[serde(default)]
    pub notes: Vec<String>,
}

impl EvalReport {
    /// Correlations of `pred` against a higher-is-better `reference`.
    pub fn correlation(pred: &[f64], reference: &[f64]) -> Result<Self> {
        Ok(Self {
            n: pred.len(),
            srocc: Some(srocc(pred, reference)?),
            plcc: Some(plcc(pred, reference)?),
            sets: vec![ScoreSummary::of("predicted", pred)],
            ..Self::default()
        })
    }

    pub fn separation(high: &[f64], low: &[f64], bins: usize) -> Result<(Self, Overlap)> {
        let ov = overlap(high, low, bins)?;
        let report = Self {
            n: high.len() + low.len(),
            sets: vec![ScoreSummary::of("high", high), ScoreSummary::of("low", low)],
            overlap_fraction: Some(ov.fraction),
            histogram: Some(ov.spec),
            ..Self::default()
        };
        Ok((report, ov))
    }
}

/// One line of a scores CSV; `severity` is empty when unknown.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub id: String,
    pub severity: Option<f64>,
    pub q: f64,
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

pub fn scores_to_csv(rows: &[ScoreRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Format(format!("csv: {e}"));
    w.write_record(["id", "severity", "q"]).map_err(csv_err)?;
    for r in rows {
        let sev = r.severity.map(fmt_f64).unwrap_or_default();
        w.write_record([r.id.as_str(), &sev, &fmt_f64(r.q)]).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv of utf-8 fields"))
}

pub fn scores_from_csv(text: &str) -> Result<Vec<ScoreRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| Error::Format(format!("scores csv: {e}")))?;
    if header.iter().collect::<Vec<_>>() != ["id", "severity", "q"] {
        return Err(Error::Format("scores csv header must be id,severity,q".into()));
    }
    let num = |s: &str, line: usize| {
        s.parse::<f64>()
            .map_err(|_| Error::Format(format!("scores csv line {line}: bad number `{s}`")))
    };
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::Format(format!("scores csv: {e}")))?;
        if rec.len() != 3 {
            return Err(Error::Format(format!("scores csv line {}: expected 3 fields", i + 2)));
        }
        rows.push(ScoreRow {
            id: rec[0].to_string(),
            severity: if rec[1].is_empty() { None } else { Some(num(&rec[1], i + 2)?) },
            q: num(&rec[2], i + 2)?,
        });
    }
    Ok(rows)
}

pub fn embeddings_to_csv(rows: &[(String, Vec<f64>)]) -> Result<String> {
    let d = rows.first().map_or(0, |r| r.1.len());
    if rows.iter().any(|r| r.1.len() != d) {
        return Err(Error::Shape("embeddings have differing widths".into()));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Format(format!("csv: {e}"));
    let mut header = vec!["id".to_string()];
    header.extend((0..d).map(|k| format!("e{k}")));
    w.write_record(&header).map_err(csv_err)?;
    for (id, e) in rows {
        let mut rec = vec![id.clone()];
        rec.extend(e.iter().map(|v| fmt_f64(*v)));
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv of utf-8 fields"))
}

const SVG_W: f64 = 640.0;
const SVG_H: f64 = 360.0;
const MARGIN: f64 = 40.0;

/// Step-outline polygon of one histogram, as SVG `points`.
fn histogram_points(masses: &[f64], peak: f64) -> String {
    let bins = masses.len() as f64;
    let (pw, ph) = (SVG_W - 2.0 * MARGIN, SVG_H - 2.0 * MARGIN);
    let base = SVG_H - MARGIN;
    let x = |b: f64| MARGIN + pw * b / bins;
    let y = |m: f64| base - ph * m / peak;
    let mut pts = vec![format!("{:.2},{:.2}", x(0.0), base)];
    for (b, &m) in masses.iter().enumerate() {
        pts.push(format!("{:.2},{:.2}", x(b as f64), y(m)));
        pts.push(format!("{:.2},{:.2}", x(b as f64 + 1.0), y(m)));
    }
    pts.push(format!("{:.2},{:.2}", x(bins), base));
    pts.join(" ")
}

/// Overlaid histograms of two score sets with the overlap fraction annotated.
pub fn overlap_svg(ov: &Overlap) -> String {
    let peak = ov.high.iter().chain(&ov.low).copied().fold(1e-12, f64::max);
    format!(
        concat!(
            "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n",
            "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{w}\" height=\"{h}\">\n",
            "<desc>overlap_fraction={frac}</desc>\n",
            "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n",
            "<polygon id=\"high\" points=\"{hp}\" fill=\"#1f77b4\" fill-opacity=\"0.45\" stroke=\"#1f77b4\"/>\n",
            "<polygon id=\"low\" points=\"{lp}\" fill=\"#d62728\" fill-opacity=\"0.45\" stroke=\"#d62728\"/>\n",
            "<text x=\"{tx}\" y=\"{ty}\" font-family=\"sans-serif\" font-size=\"14\">overlap {pct:.2}% ({bins} bins, q in [{lo:.4}, {hi:.4}])</text>\n",
            "</svg>\n"
        ),
        w = SVG_W,
        h = SVG_H,
        frac = ov.fraction,
        hp = histogram_points(&ov.high, peak),
        lp = histogram_points(&ov.low, peak),
        tx = MARGIN,
        ty = MARGIN / 2.0 + 5.0,
        pct = 100.0 * ov.fraction,
        bins = ov.spec.bins,
        lo = ov.spec.lo,
        hi = ov.spec.hi,
    )
}

#[derive(Debug, Clone, Default)]
pub struct ExportedFiles {
    pub report: PathBuf,
    pub scores: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub figure: Option<PathBuf>,
}

/// Writes `scores.csv`, `embeddings.csv`, `overlap.svg` and `report.json`
/// into `out_dir`. Files with no content are skipped and noted in the report.
pub fn export_report(
    report: &EvalReport,
    scores: &[ScoreRow],
    embeddings: &[(String, Vec<f64>)],
    overlap: Option<&Overlap>,
    out_dir: &Path,
) -> Result<ExportedFiles> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let write = |name: &str, body: &str| -> Result<PathBuf> {
        let p = out_dir.join(name);
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    };
    let mut report = report.clone();
    let mut files = ExportedFiles::default();
    if scores.is_empty() {
        report.notes.push("no scores; scores.csv omitted".into());
    } else {
        files.scores = Some(write("scores.csv", &scores_to_csv(scores)?)?);
    }
    if embeddings.is_empty() {
        report.notes.push("no embeddings; embeddings.csv omitted".into());
    } else {
        files.embeddings = Some(write("embeddings.csv", &embeddings_to_csv(embeddings)?)?);
    }
    if let Some(ov) = overlap {
        files.figure = Some(write("overlap.svg", &overlap_svg(ov))?);
    }
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Format(format!("report: {e}")))?;
    files.report = write("report.json", &(json + "\n"))?;
    Ok(files)
}
