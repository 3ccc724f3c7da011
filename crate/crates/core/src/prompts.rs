//! Text prompts describing a recipe and their deterministic embeddings.
//!
//! Prompts follow one template:
//!
//! ```text
//! This photo has {a distortion|multiple distortions} such as {names}. The quality is {adjective}. This image shows {caption}.
//! ```
//!
//! Embeddings are built without a language model. The prompt is lowercased
//! and split on every non-alphanumeric character. Token `t` maps to the unit
//! vector of `D_text` draws of `SplitMix64(derive_seed(vocab_seed, fnv1a64(t)))::normal`.
//! The sentence vector is the mean of token vectors with weight
//! `1 - 0.5 i / (n - 1)` at position `i`, plus twice the adjective's vector,
//! then normalized.

use std::collections::BTreeMap;
use std::path::Path;

use crate::distort::{Recipe, Registry};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, fnv1a64, SplitMix64};

pub const ADJECTIVES: [&str; 5] = ["excellent", "good", "average", "poor", "bad"];
pub const DEFAULT_CAPTION: &str = "an image";
pub const MIN_TEXT_WIDTH: usize = 8;
const ADJECTIVE_WEIGHT: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    /// Registry ids in application order.
    pub distortion_names: Vec<String>,
    pub quality_adjective: &'static str,
    pub caption: String,
    pub rendered: String,
}

/// Equal quintiles of `d`: `[0, 0.2)` excellent up to `[0.8, 1]` bad.
pub fn severity_adjective(d: f64) -> Result<&'static str> {
    if !(0.0..=1.0).contains(&d) {
        return Err(Error::InvalidArgument(format!("severity {d} outside [0, 1]")));
    }
    let bin = if d < 0.2 {
        0
    } else if d < 0.4 {
        1
    } else if d < 0.6 {
        2
    } else if d < 0.8 {
        3
    } else {
        4
    };
    Ok(ADJECTIVES[bin])
}

pub fn build_prompt(reg: &Registry, recipe: &Recipe, caption: &str) -> Result<Prompt> {
    if recipe.steps.is_empty() {
        return Err(Error::EmptyRecipe);
    }
    let adjective = severity_adjective(recipe.severity)?;
    let names = recipe
        .steps
        .iter()
        .map(|s| reg.display_name(&s.kind))
        .collect::<Result<Vec<_>>>()?;
    let clause = if recipe.steps.len() == 1 {
        "a distortion"
    } else {
        "multiple distortions"
    };
    let rendered = format!(
        "This photo has {clause} such as {}. The quality is {adjective}. This image shows {caption}.",
        names.join(", ")
    );
    Ok(Prompt {
        distortion_names: recipe.steps.iter().map(|s| s.kind.clone()).collect(),
        quality_adjective: adjective,
        caption: caption.to_string(),
        rendered,
    })
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub fn token_vector(token: &str, width: usize, vocab_seed: u64) -> Vec<f64> {
    let mut rng = SplitMix64::new(derive_seed(vocab_seed, fnv1a64(token.as_bytes())));
    let mut v: Vec<f64> = (0..width).map(|_| rng.normal()).collect();
    normalize(&mut v);
    v
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Embedding of arbitrary text, optionally emphasizing one token.
pub fn embed_text(text: &str, emphasis: Option<&str>, width: usize, vocab_seed: u64) -> Result<Vec<f64>> {
    if width < MIN_TEXT_WIDTH {
        return Err(Error::InvalidArgument(format!(
            "text width {width} below minimum {MIN_TEXT_WIDTH}"
        )));
    }
    let tokens = tokenize(text);
    let mut v = vec![0.0; width];
    let n = tokens.len();
    if n > 0 {
        let weights: Vec<f64> = (0..n)
            .map(|i| if n == 1 { 1.0 } else { 1.0 - 0.5 * i as f64 / (n - 1) as f64 })
            .collect();
        let total: f64 = weights.iter().sum();
        for (t, w) in tokens.iter().zip(&weights) {
            for (a, b) in v.iter_mut().zip(token_vector(t, width, vocab_seed)) {
                *a += w / total * b;
            }
        }
    }
    if let Some(e) = emphasis {
        for (a, b) in v.iter_mut().zip(token_vector(&e.to_lowercase(), width, vocab_seed)) {
            *a += ADJECTIVE_WEIGHT * b;
        }
    }
    if normalize(&mut v) == 0.0 {
        return Err(Error::Degenerate(format!("text `{text}` has no tokens to embed")));
    }
    Ok(v)
}

pub fn embed_prompt(prompt: &Prompt, width: usize, vocab_seed: u64) -> Result<Vec<f64>> {
    embed_text(&prompt.rendered, Some(prompt.quality_adjective), width, vocab_seed)
}

/// Precomputed unit embeddings keyed by id, as stored in `HRQE` files:
///
/// ```text
/// "HRQE" | version u32 | count u32 | width u32
/// count x (id length u16 | utf-8 id | width x f32)
/// ```
/// little-endian throughout.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingTable {
    pub width: usize,
    pub rows: BTreeMap<String, Vec<f32>>,
    /// Insertion order, which is also file order.
    pub order: Vec<String>,
}

pub const HRQE_MAGIC: &[u8; 4] = b"HRQE";
pub const HRQE_VERSION: u32 = 1;
const NORM_TOL: f64 = 1e-6;

impl EmbeddingTable {
    pub fn new(width: usize) -> Self {
        Self {
            width,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Inserts a row, normalizing it unless already unit-norm within 1e-6.
    pub fn insert(&mut self, id: &str, row: Vec<f32>) -> Result<()> {
        if row.len() != self.width {
            return Err(Error::Shape(format!("row `{id}` has width {}, table {}", row.len(), self.width)));
        }
        if id.len() > u16::MAX as usize {
            return Err(Error::InvalidArgument(format!("id of {} bytes is too long", id.len())));
        }
        let row = unit_row(id, row)?;
        if self.rows.insert(id.to_string(), row).is_none() {
            self.order.push(id.to_string());
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<Vec<f64>> {
        self.rows.get(id).map(|r| r.iter().map(|&v| f64::from(v)).collect())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(HRQE_MAGIC);
        out.extend_from_slice(&HRQE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.order.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        for id in &self.order {
            out.extend_from_slice(&(id.len() as u16).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            for v in &self.rows[id] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], expected_width: Option<usize>) -> Result<Self> {
        let bad = |m: String| Error::Format(m);
        if bytes.len() < 16 || &bytes[..4] != HRQE_MAGIC {
            return Err(bad("not an HRQE file (bad magic)".into()));
        }
        let u32_at = |p: usize| u32::from_le_bytes(bytes[p..p + 4].try_into().expect("4 bytes"));
        let version = u32_at(4);
        if version != HRQE_VERSION {
            return Err(bad(format!("unsupported HRQE version {version}")));
        }
        let count = u32_at(8) as usize;
        let width = u32_at(12) as usize;
        if let Some(w) = expected_width {
            if w != width {
                return Err(Error::Shape(format!("embedding width {width}, configured {w}")));
            }
        }
        let mut table = Self::new(width);
        let mut pos = 16;
        for i in 0..count {
            let truncated = || bad(format!("HRQE payload truncated in row {i}"));
            let len_bytes = bytes.get(pos..pos + 2).ok_or_else(truncated)?;
            let len = u16::from_le_bytes(len_bytes.try_into().expect("2 bytes")) as usize;
            pos += 2;
            let id = std::str::from_utf8(bytes.get(pos..pos + len).ok_or_else(truncated)?)
                .map_err(|_| bad(format!("row {i} id is not UTF-8")))?
                .to_string();
            pos += len;
            let raw = bytes.get(pos..pos + 4 * width).ok_or_else(truncated)?;
            pos += 4 * width;
            let row = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            table.insert(&id, row)?;
        }
        if pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes after {count} rows", bytes.len() - pos)));
        }
        Ok(table)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }
}

fn unit_row(id: &str, mut row: Vec<f32>) -> Result<Vec<f32>> {
    let norm = row.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
    if !norm.is_finite() || norm == 0.0 {
        return Err(Error::Format(format!("row `{id}` cannot be normalized")));
    }
    if (norm - 1.0).abs() >= NORM_TOL {
        row.iter_mut().for_each(|v| *v = (f64::from(*v) / norm) as f32);
    }
    Ok(row)
}

pub fn load_embeddings(path: &Path, expected_width: Option<usize>) -> Result<EmbeddingTable> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    EmbeddingTable::decode(&bytes, expected_width)
}
