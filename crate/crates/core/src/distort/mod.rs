//! Image degradation with continuous severity levels.
//!
//! A [`Recipe`] is an ordered list of [`DistortionStep`]s drawn from distinct
//! categories of the [`Registry`]. Each step carries a continuous level
//! `l* = clip(l + delta, 1, 5)` where `l` is a uniform base level and `delta`
//! a Gaussian offset; kernel parameters are interpolated between the two
//! nearest table rows. The recipe's severity is the normalized maximum level.

mod ops;
pub mod registry;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgproc::{luma, Image};
use crate::rng::{derive_seed, SplitMix64};

pub use registry::{Category, DistortionKind, EnergyStat, ParamSet, Registry, IDENTITY, LEVELS};

/// Default cap on steps per recipe.
pub const L_DIST: usize = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionStep {
    pub kind: String,
    pub level: f64,
}

impl DistortionStep {
    pub fn new(kind: impl Into<String>, level: f64) -> Self {
        Self {
            kind: kind.into(),
            level: level.clamp(1.0, LEVELS as f64),
        }
    }

    /// Parses `kind:level`, e.g. `gaussian-blur:3.5`.
    pub fn parse(spec: &str) -> Result<Self> {
        let (kind, level) = spec
            .rsplit_once(':')
            .ok_or_else(|| Error::InvalidArgument(format!("step `{spec}` is not kind:level")))?;
        let level: f64 = level
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad level in `{spec}`")))?;
        if !(1.0..=LEVELS as f64).contains(&level) {
            return Err(Error::InvalidArgument(format!("level {level} outside [1, 5]")));
        }
        Ok(Self::new(kind, level))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub steps: Vec<DistortionStep>,
    #[serde(with = "crate::seed_str")]
    pub seed: u64,
    pub severity: f64,
}

impl Recipe {
    pub fn new(steps: Vec<DistortionStep>, seed: u64) -> Result<Self> {
        let severity = severity_of(&steps)?;
        Ok(Self {
            steps,
            seed,
            severity,
        })
    }

    /// Single no-op step; degrading with it returns the input unchanged.
    pub fn neutral(seed: u64) -> Self {
        Self::new(vec![DistortionStep::new(IDENTITY, 1.0)], seed).expect("one step")
    }

    /// Seed handed to step `index` during [`degrade`].
    pub fn step_seed(&self, index: usize) -> u64 {
        derive_seed(self.seed, index as u64)
    }

    /// Recomputes the severity from the steps.
    pub fn recomputed_severity(&self) -> Result<f64> {
        severity_of(&self.steps)
    }
}

/// `d = (max level - 1) / 4`.
pub fn severity_of(steps: &[DistortionStep]) -> Result<f64> {
    let max = steps
        .iter()
        .map(|s| s.level)
        .fold(None, |acc: Option<f64>, l| Some(acc.map_or(l, |a| a.max(l))))
        .ok_or(Error::EmptyRecipe)?;
    Ok(((max - 1.0) / (LEVELS as f64 - 1.0)).clamp(0.0, 1.0))
}

pub fn severity(recipe: &Recipe) -> Result<f64> {
    severity_of(&recipe.steps)
}

/// Draws a recipe. The stream from `SplitMix64::new(seed)` is consumed as:
///
/// 1. `count = 1 + below(max_steps)`;
/// 2. a forward partial Fisher-Yates over the seven categories in canonical
///    order: for `i in 0..count`, swap slot `i` with `i + below(7 - i)`;
/// 3. per chosen category in that order: `below(n_kinds)` picks the kind
///    (registry order), `1 + below(5)` the base level, then one `normal()`
///    scaled by `sigma_off` is the offset, and the level is clipped to `[1, 5]`.
pub fn sample_recipe(reg: &Registry, seed: u64, max_steps: usize, sigma_off: f64) -> Result<Recipe> {
    let n_cat = Category::ALL.len();
    if max_steps == 0 || max_steps > n_cat {
        return Err(Error::InvalidArgument(format!(
            "max_steps must be in 1..={n_cat}, got {max_steps}"
        )));
    }
    if !(sigma_off >= 0.0 && sigma_off.is_finite()) {
        return Err(Error::InvalidArgument(format!("sigma_off must be >= 0, got {sigma_off}")));
    }
    let mut rng = SplitMix64::new(seed);
    let count = 1 + rng.below(max_steps as u64) as usize;
    let mut cats = Category::ALL;
    for i in 0..count {
        let j = i + rng.below((n_cat - i) as u64) as usize;
        cats.swap(i, j);
    }
    let mut steps = Vec::with_capacity(count);
    for &cat in &cats[..count] {
        let kinds: Vec<&DistortionKind> = reg.in_category(cat).collect();
        if kinds.is_empty() {
            return Err(Error::Registry(format!("category {cat} has no kinds")));
        }
        let kind = kinds[rng.below(kinds.len() as u64) as usize];
        let base = 1 + rng.below(LEVELS as u64);
        let delta = sigma_off * rng.normal();
        steps.push(DistortionStep::new(kind.id.clone(), base as f64 + delta));
    }
    Recipe::new(steps, seed)
}

/// Applies a kind with explicit parameters, bypassing the level table.
pub fn apply_params(kind: &DistortionKind, img: &Image, params: &ParamSet, step_seed: u64) -> Image {
    let mut rng = SplitMix64::new(step_seed);
    kind.op.apply(img, params, &mut rng)
}

pub fn apply_step(reg: &Registry, img: &Image, step: &DistortionStep, step_seed: u64) -> Result<Image> {
    if step.kind == IDENTITY {
        return Ok(img.clone());
    }
    let kind = reg.get(&step.kind)?;
    let params = kind.level_params(step.level.clamp(1.0, LEVELS as f64))?;
    Ok(apply_params(kind, img, &params, step_seed))
}

/// Applies every step in order with seeds split from `recipe.seed`.
pub fn degrade(reg: &Registry, img: &Image, recipe: &Recipe) -> Result<Image> {
    let mut out = img.clone();
    for (i, step) in recipe.steps.iter().enumerate() {
        out = apply_step(reg, &out, step, recipe.step_seed(i))?;
    }
    Ok(out)
}

/// Evaluates a registry energy statistic on `img` (`src` is the reference
/// for [`EnergyStat::Mse`]).
pub fn energy(stat: EnergyStat, img: &Image, src: &Image) -> f64 {
    let n = (img.width() * img.height()) as f64;
    match stat {
        EnergyStat::MeanLuma => img.luma().iter().map(|&v| f64::from(v)).sum::<f64>() / n,
        EnergyStat::LumaStd => {
            let l = img.luma();
            let m = l.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
            (l.iter().map(|&v| (f64::from(v) - m).powi(2)).sum::<f64>() / n).sqrt()
        }
        EnergyStat::LaplacianEnergy => laplacian_energy(img),
        EnergyStat::ChromaEnergy => {
            img.data()
                .chunks_exact(3)
                .map(|p| {
                    let y = luma(p[0], p[1], p[2]);
                    p.iter().map(|&c| f64::from(c - y).powi(2)).sum::<f64>()
                })
                .sum::<f64>()
                / n
        }
        EnergyStat::Mse => {
            img.data()
                .iter()
                .zip(src.data())
                .map(|(&a, &b)| f64::from(a - b).powi(2))
                .sum::<f64>()
                / img.data().len() as f64
        }
    }
}

/// Mean squared 4-neighbour Laplacian of luma over interior pixels.
pub fn laplacian_energy(img: &Image) -> f64 {
    let (w, h) = (img.width(), img.height());
    if w < 3 || h < 3 {
        return 0.0;
    }
    let l = img.luma();
    let mut acc = 0f64;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let c = l[y * w + x];
            let lap = l[y * w + x - 1] + l[y * w + x + 1] + l[(y - 1) * w + x] + l[(y + 1) * w + x]
                - 4.0 * c;
            acc += f64::from(lap).powi(2);
        }
    }
    acc / ((w - 2) * (h - 2)) as f64
}
