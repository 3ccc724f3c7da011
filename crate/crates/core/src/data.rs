//! Corpus manifests and deterministic batch streams.
//!
//! A manifest is JSON lines: one [`ManifestHeader`] line followed by one
//! [`ManifestRecord`] per degraded sample. File `k` of the sorted corpus
//! listing (undecodable files included, so seeds do not shift when one is
//! skipped) and variant `v` use the record seed
//! `derive_seed(master_seed, k * V + v)`; its stream 0 is the crop seed and
//! stream 1 the recipe seed.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distort::{degrade, sample_recipe, Recipe, Registry};
use crate::error::{Error, Result};
use crate::features::extract_patch_features;
use crate::imgproc::{load_image, random_crop, Image};
use crate::model::BatchRecord;
use crate::prompts::{build_prompt, embed_text, severity_adjective, DEFAULT_CAPTION};
use crate::rng::{derive_seed, SplitMix64};

pub const MANIFEST_FORMAT: &str = "ouiqa-manifest";
pub const MANIFEST_VERSION: u32 = 1;
pub const CAPTIONS_FILE: &str = "captions.tsv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub crop_size: usize,
    pub variants: usize,
    pub max_steps: usize,
    pub sigma_off: f64,
    #[serde(with = "crate::seed_str")]
    pub master_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestHeader {
    pub format: String,
    pub version: u32,
    pub config: DatasetConfig,
    pub records: usize,
    pub skipped: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub source_path: String,
    #[serde(with = "crate::seed_str")]
    pub crop_seed: u64,
    pub recipe: Recipe,
    pub severity: f64,
    pub prompt: String,
    pub caption: String,
    pub variant_index: usize,
    /// External quality reference (higher is better) used by evaluation in
    /// place of `1 - severity` when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub header: ManifestHeader,
    pub records: Vec<ManifestRecord>,
}

fn read_captions(dir: &Path) -> Result<HashMap<String, String>> {
    let path = dir.join(CAPTIONS_FILE);
    if !path.exists() {
        return Ok(HashMap::new());
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(text
        .lines()
        .filter_map(|l| l.split_once('\t'))
        .map(|(f, c)| (f.trim().to_string(), c.trim().to_string()))
        .collect())
}

/// Regular files of `dir` in byte order of their names, captions file excluded.
pub fn list_corpus(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_file() && path.file_name().is_some_and(|n| n != CAPTIONS_FILE) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

pub fn build_manifest(reg: &Registry, corpus_dir: &Path, cfg: &DatasetConfig) -> Result<Manifest> {
    if cfg.variants == 0 {
        return Err(Error::InvalidArgument("variants must be at least 1".into()));
    }
    let files = list_corpus(corpus_dir)?;
    let captions = read_captions(corpus_dir)?;
    let decoded: Vec<(PathBuf, Result<Image>)> = files.into_par_iter().map(|p| {
        let img = load_image(&p);
        (p, img)
    }).collect();
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for (k, (path, img)) in decoded.into_iter().enumerate() {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let img = match img {
            Ok(img) => img,
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                skipped.push(name);
                continue;
            }
        };
        if img.width() < cfg.crop_size || img.height() < cfg.crop_size {
            log::warn!("skipping {}: smaller than the {}px crop", path.display(), cfg.crop_size);
            skipped.push(name);
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or(&name).to_string();
        let caption = captions.get(&name).cloned().unwrap_or_else(|| DEFAULT_CAPTION.to_string());
        for v in 0..cfg.variants {
            let rec_seed = derive_seed(cfg.master_seed, (k * cfg.variants + v) as u64);
            let recipe = sample_recipe(reg, derive_seed(rec_seed, 1), cfg.max_steps, cfg.sigma_off)?;
            let prompt = build_prompt(reg, &recipe, &caption)?;
            records.push(ManifestRecord {
                id: format!("{stem}#{v}"),
                source_path: path.to_string_lossy().into_owned(),
                crop_seed: derive_seed(rec_seed, 0),
                severity: recipe.severity,
                recipe,
                prompt: prompt.rendered,
                caption: caption.clone(),
                variant_index: v,
                reference: None,
            });
        }
    }
    if records.is_empty() {
        return Err(Error::EmptyCorpus(corpus_dir.to_path_buf()));
    }
    Ok(Manifest {
        header: ManifestHeader {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            config: cfg.clone(),
            records: records.len(),
            skipped,
        },
        records,
    })
}

impl Manifest {
    pub fn to_jsonl(&self) -> String {
        let mut s = serde_json::to_string(&self.header).expect("header serializes");
        s.push('\n');
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("record serializes"));
            s.push('\n');
        }
        s
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let head = lines.next().ok_or_else(|| Error::Format("empty manifest".into()))?;
        let header: ManifestHeader =
            serde_json::from_str(head).map_err(|e| Error::Format(format!("manifest header: {e}")))?;
        if header.format != MANIFEST_FORMAT || header.version != MANIFEST_VERSION {
            return Err(Error::Format(format!(
                "unsupported manifest {} v{}",
                header.format, header.version
            )));
        }
        let mut records = Vec::new();
        for (i, l) in lines.enumerate() {
            let r: ManifestRecord = serde_json::from_str(l)
                .map_err(|e| Error::Format(format!("manifest line {}: {e}", i + 2)))?;
            let d = r.recipe.recomputed_severity()?;
            if (d - r.severity).abs() > 1e-12 || r.variant_index >= header.config.variants.max(1) {
                return Err(Error::Format(format!("record `{}` is inconsistent", r.id)));
            }
            records.push(r);
        }
        if records.len() != header.records {
            return Err(Error::Format(format!(
                "header declares {} records, found {}",
                header.records,
                records.len()
            )));
        }
        Ok(Self { header, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text)
    }

    pub fn severities(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.severity).collect()
    }
}

/// Settings that turn a manifest record into model input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrepConfig {
    pub crop_size: usize,
    pub grid: usize,
    pub d_text: usize,
    pub vocab_seed: u64,
}

/// The degraded crop a record describes.
pub fn materialize(reg: &Registry, rec: &ManifestRecord, crop_size: usize) -> Result<Image> {
    let wrap = |e: Error| Error::Record {
        record: rec.id.clone(),
        source: Box::new(e),
    };
    let img = load_image(&rec.source_path).map_err(wrap)?;
    let crop = random_crop(&img, crop_size, rec.crop_seed).map_err(wrap)?;
    degrade(reg, &crop, &rec.recipe).map_err(wrap)
}

pub fn prompt_embedding(rec: &ManifestRecord, d_text: usize, vocab_seed: u64) -> Result<Vec<f64>> {
    let adjective = severity_adjective(rec.severity)?;
    embed_text(&rec.prompt, Some(adjective), d_text, vocab_seed)
}

pub fn prepare_record(reg: &Registry, rec: &ManifestRecord, cfg: &PrepConfig) -> Result<BatchRecord> {
    let img = materialize(reg, rec, cfg.crop_size)?;
    let wrap = |e: Error| Error::Record {
        record: rec.id.clone(),
        source: Box::new(e),
    };
    let features = extract_patch_features(&img, cfg.grid, cfg.grid).map_err(wrap)?;
    let text = prompt_embedding(rec, cfg.d_text, cfg.vocab_seed).map_err(wrap)?;
    Ok(BatchRecord::new(rec.id.clone(), features, rec.severity, text))
}

/// Prepares every record in parallel; the result order follows `records`
/// regardless of how many workers run.
pub fn prepare_all(reg: &Registry, records: &[ManifestRecord], cfg: &PrepConfig) -> Result<Vec<BatchRecord>> {
    records.par_iter().map(|r| prepare_record(reg, r, cfg)).collect()
}

/// Batches of one epoch as indices into the record list.
///
/// Records are ordered by severity (ties broken by a shuffle keyed by
/// `(master_seed, epoch)`) and cut into strata of `ceil(n / batch_size)`
/// consecutive ranks, with any short stratum placed in the middle. After a
/// shuffle within each stratum, batch `b` takes element `b` of every
/// stratum, so each batch spans the lowest to the highest severities; the
/// batch order is shuffled last.
pub fn epoch_plan(severities: &[f64], batch_size: usize, master_seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let n = severities.len();
    if n == 0 || batch_size == 0 {
        return Vec::new();
    }
    let mut rng = SplitMix64::new(derive_seed(master_seed, epoch));
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order.sort_by(|&a, &b| severities[a].total_cmp(&severities[b]));

    let n_batches = n.div_ceil(batch_size);
    let n_strata = n.div_ceil(n_batches);
    let short = n - (n_strata - 1) * n_batches;
    let short_at = if short < n_batches { n_strata / 2 } else { n_strata };
    let mut strata = Vec::with_capacity(n_strata);
    let mut pos = 0;
    for s in 0..n_strata {
        let len = if s == short_at { short } else { n_batches };
        let mut st = order[pos..pos + len].to_vec();
        rng.shuffle(&mut st);
        strata.push(st);
        pos += len;
    }
    let mut batches: Vec<Vec<usize>> = (0..n_batches)
        .map(|b| strata.iter().filter_map(|s| s.get(b).copied()).collect())
        .collect();
    rng.shuffle(&mut batches);
    batches
}

/// Prepared records of batch `step` in epoch `epoch`.
pub fn next_batch(
    reg: &Registry,
    manifest: &Manifest,
    prep: &PrepConfig,
    batch_size: usize,
    epoch: u64,
    step: usize,
) -> Result<Vec<BatchRecord>> {
    if manifest.records.is_empty() {
        return Err(Error::InvalidArgument("manifest has no records".into()));
    }
    let plan = epoch_plan(&manifest.severities(), batch_size, manifest.header.config.master_seed, epoch);
    let idx = plan
        .get(step)
        .ok_or_else(|| Error::InvalidArgument(format!("epoch has {} batches, step {step} requested", plan.len())))?;
    let recs: Vec<ManifestRecord> = idx.iter().map(|&i| manifest.records[i].clone()).collect();
    prepare_all(reg, &recs, prep)
}
