//! Run configuration: TOML sections merged with `section.key=value`
//! overrides, validated on load, with per-key provenance.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{DatasetConfig, PrepConfig};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::{AdamHyper, Dims, Preset};
use crate::prompts::MIN_TEXT_WIDTH;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub crop_size: usize,
    /// Patches per side of the feature grid.
    pub grid: usize,
    pub variants: usize,
    pub max_steps: usize,
    pub sigma_off: f64,
    pub master_seed: u64,
    pub vocab_seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            crop_size: 384,
            grid: 8,
            variants: 5,
            max_steps: 7,
            sigma_off: 0.3,
            master_seed: 0,
            vocab_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub preset: Preset,
    /// Hidden and embedding widths, required for the custom preset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embed: Option<usize>,
    pub d_text: usize,
    pub init_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: Preset::Small,
            hidden: None,
            embed: None,
            d_text: 64,
            init_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub lr_min: f64,
    /// Length of the cosine schedule; 0 means the run's own step count.
    pub total_steps: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let h = AdamHyper::default();
        Self {
            batch_size: 16,
            epochs: 3,
            lr0: h.lr0,
            lr_min: h.lr_min,
            total_steps: h.total_steps,
            weight_decay: h.weight_decay,
            beta1: h.beta1,
            beta2: h.beta2,
            eps: h.eps,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub bins: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            bins: crate::eval::DEFAULT_BINS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub log: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub data: DataSection,
    pub model: ModelSection,
    pub loss: LossConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub paths: PathsSection,
}

/// Defaults taken from the published training setup; every other default
/// is chosen for this implementation.
pub const PUBLISHED_KEYS: &[&str] = &[
    "data.crop_size",
    "data.variants",
    "data.max_steps",
    "data.sigma_off",
    "train.epochs",
    "train.lr0",
    "train.lr_min",
    "train.total_steps",
    "train.weight_decay",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Published,
    ArtifactDefault,
    File,
    Override,
}

impl Origin {
    pub fn as_str(self) -> &'static str {
        match self {
            Origin::Published => "published setting",
            Origin::ArtifactDefault => "artifact default",
            Origin::File => "config file",
            Origin::Override => "command line",
        }
    }
}

/// A validated configuration with the origin of each leaf value.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: Config,
    pub origins: BTreeMap<String, Origin>,
}

fn leaves(prefix: &str, v: &toml::Value, out: &mut BTreeMap<String, toml::Value>) {
    match v {
        toml::Value::Table(t) => {
            for (k, x) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                leaves(&key, x, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), v.clone());
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.len() != 2 || parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` must look like section.key")));
    }
    let section = table
        .entry(parts[0])
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    match section {
        toml::Value::Table(t) => {
            t.insert(parts[1].to_string(), value);
            Ok(())
        }
        _ => Err(Error::Config(format!("`{}` is not a section", parts[0]))),
    }
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::resolve_str(text, &[]).map(|r| r.config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::resolve(Some(path), &[]).map(|r| r.config)
    }

    /// Defaults, then the file at `path`, then `overrides` (`section.key`,
    /// raw TOML value; bare words are taken as strings).
    pub fn resolve(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Resolved> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::resolve_str(&text, overrides)
    }

    pub fn resolve_str(text: &str, overrides: &[(String, String)]) -> Result<Resolved> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut set = BTreeMap::new();
        leaves("", &toml::Value::Table(table.clone()), &mut set);
        let mut origins: BTreeMap<String, Origin> = set.keys().map(|k| (k.clone(), Origin::File)).collect();
        for (k, raw) in overrides {
            set_path(&mut table, k, parse_value(raw))?;
            origins.insert(k.clone(), Origin::Override);
        }
        let config: Config = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        for key in config.flatten().keys() {
            origins.entry(key.clone()).or_insert(if PUBLISHED_KEYS.contains(&key.as_str()) {
                Origin::Published
            } else {
                Origin::ArtifactDefault
            });
        }
        Ok(Resolved { config, origins })
    }

    /// Every leaf value keyed `section.key`.
    pub fn flatten(&self) -> BTreeMap<String, toml::Value> {
        let v = toml::Value::try_from(self).expect("config serializes");
        let mut out = BTreeMap::new();
        leaves("", &v, &mut out);
        out
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn dims(&self) -> Result<Dims> {
        let m = &self.model;
        match m.preset {
            Preset::Custom => match (m.hidden, m.embed) {
                (Some(h), Some(d)) if h > 0 && d > 0 => Ok(Dims {
                    k: crate::features::FEATURE_DIM,
                    h,
                    d,
                    d_text: m.d_text,
                }),
                _ => Err(Error::Config("custom preset needs model.hidden and model.embed".into())),
            },
            p => {
                if m.hidden.is_some() || m.embed.is_some() {
                    return Err(Error::Config(format!(
                        "model.hidden/model.embed only apply to the custom preset, not `{p}`"
                    )));
                }
                Dims::preset(p, m.d_text)
            }
        }
    }

    pub fn dataset(&self) -> DatasetConfig {
        DatasetConfig {
            crop_size: self.data.crop_size,
            variants: self.data.variants,
            max_steps: self.data.max_steps,
            sigma_off: self.data.sigma_off,
            master_seed: self.data.master_seed,
        }
    }

    pub fn prep(&self) -> PrepConfig {
        PrepConfig {
            crop_size: self.data.crop_size,
            grid: self.data.grid,
            d_text: self.model.d_text,
            vocab_seed: self.data.vocab_seed,
        }
    }

    pub fn adam(&self, run_steps: u64) -> AdamHyper {
        let t = &self.train;
        AdamHyper {
            lr0: t.lr0,
            lr_min: t.lr_min,
            total_steps: if t.total_steps == 0 { run_steps } else { t.total_steps },
            weight_decay: t.weight_decay,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let (d, t, l) = (&self.data, &self.train, &self.loss);
        if d.grid == 0 || d.crop_size < d.grid {
            return bad(format!("data.grid {} must be in 1..=crop_size ({})", d.grid, d.crop_size));
        }
        if d.variants == 0 {
            return bad("data.variants must be at least 1".into());
        }
        if d.max_steps == 0 {
            return bad("data.max_steps must be at least 1".into());
        }
        if !(d.sigma_off >= 0.0 && d.sigma_off.is_finite()) {
            return bad("data.sigma_off must be a finite value >= 0".into());
        }
        if self.model.d_text < MIN_TEXT_WIDTH {
            return bad(format!("model.d_text must be at least {MIN_TEXT_WIDTH}"));
        }
        self.dims()?;
        if t.batch_size == 0 || t.epochs == 0 {
            return bad("train.batch_size and train.epochs must be at least 1".into());
        }
        if !(t.lr0 > 0.0 && t.lr_min >= 0.0 && t.lr_min <= t.lr0) {
            return bad("learning rates need 0 <= train.lr_min <= train.lr0 and lr0 > 0".into());
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) || t.eps <= 0.0 || t.weight_decay < 0.0 {
            return bad("train.beta1/beta2 must lie in [0, 1), eps > 0 and weight_decay >= 0".into());
        }
        let lambdas = [l.lambda_rank, l.lambda_mreg, l.lambda_align, l.lambda_emb, l.lambda_cov, l.t_d, l.t_q, l.margin];
        if lambdas.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("loss weights, thresholds and margin must be finite and >= 0".into());
        }
        if l.combo_cap == 0 {
            return bad("loss.combo_cap must be at least 1".into());
        }
        if self.eval.bins < 2 {
            return bad("eval.bins must be at least 2".into());
        }
        Ok(())
    }
}

impl Resolved {
    /// `key = value  # origin` lines, one per leaf.
    pub fn show(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.config.flatten() {
            let origin = self.origins.get(&k).copied().unwrap_or(Origin::ArtifactDefault);
            s.push_str(&format!("{k} = {v}  # {}\n", origin.as_str()));
        }
        s
    }
}
