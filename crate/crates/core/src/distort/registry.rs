use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::Deserialize;

use crate::error::{Error, Result};

use super::ops::Op;

pub const LEVELS: usize = 5;

const BUILTIN_TABLE: &str = include_str!("../../data/registry.toml");

/// The seven degradation families, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    BrightnessChange,
    Blur,
    Spatial,
    Color,
    Compression,
    Noise,
    SharpnessContrast,
}

impl Category {
    pub const ALL: [Category; 7] = [
        Category::BrightnessChange,
        Category::Blur,
        Category::Spatial,
        Category::Color,
        Category::Compression,
        Category::Noise,
        Category::SharpnessContrast,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::BrightnessChange => "brightness-change",
            Category::Blur => "blur",
            Category::Spatial => "spatial",
            Category::Color => "color",
            Category::Compression => "compression",
            Category::Noise => "noise",
            Category::SharpnessContrast => "sharpness-contrast",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Image statistic expected to move monotonically with a kind's level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnergyStat {
    MeanLuma,
    LumaStd,
    LaplacianEnergy,
    ChromaEnergy,
    /// Mean squared error against the undistorted input.
    Mse,
}

impl FromStr for EnergyStat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "mean-luma" => EnergyStat::MeanLuma,
            "luma-std" => EnergyStat::LumaStd,
            "laplacian-energy" => EnergyStat::LaplacianEnergy,
            "chroma-energy" => EnergyStat::ChromaEnergy,
            "mse" => EnergyStat::Mse,
            _ => return Err(Error::Registry(format!("unknown energy statistic `{s}`"))),
        })
    }
}

/// Named numeric parameters in registry order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet(Vec<(String, f64)>);

impl ParamSet {
    pub fn new(pairs: Vec<(String, f64)>) -> Self {
        Self(pairs)
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.0.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.0.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

#[derive(Debug, Clone)]
pub struct DistortionKind {
    pub id: String,
    /// Human-readable name used in prompts.
    pub name: String,
    pub category: Category,
    pub stochastic: bool,
    pub energy: EnergyStat,
    pub params: Vec<String>,
    pub integer: Vec<String>,
    pub rows: [Vec<f64>; LEVELS],
    pub(crate) op: Op,
}

impl DistortionKind {
    /// Parameters at continuous level `level` in `[1, 5]`.
    ///
    /// Integer levels return the table row verbatim; otherwise each value is
    /// interpolated between rows `floor(level)` and `ceil(level)`, and
    /// integer-valued parameters are rounded afterwards.
    pub fn level_params(&self, level: f64) -> Result<ParamSet> {
        if !(1.0..=LEVELS as f64).contains(&level) {
            return Err(Error::InvalidArgument(format!(
                "level {level} outside [1, {LEVELS}]"
            )));
        }
        let lo = level.floor();
        let t = level - lo;
        let lo_row = &self.rows[lo as usize - 1];
        if t == 0.0 {
            return Ok(self.named(lo_row.clone()));
        }
        let hi_row = &self.rows[lo as usize];
        let values = self
            .params
            .iter()
            .enumerate()
            .map(|(i, name)| {
                let v = lo_row[i] + t * (hi_row[i] - lo_row[i]);
                if self.integer.contains(name) {
                    v.round()
                } else {
                    v
                }
            })
            .collect();
        Ok(self.named(values))
    }

    fn named(&self, values: Vec<f64>) -> ParamSet {
        ParamSet(self.params.iter().cloned().zip(values).collect())
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TableFile {
    version: u32,
    kind: Vec<KindEntry>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct KindEntry {
    id: String,
    name: String,
    category: Category,
    #[serde(default)]
    op: Option<String>,
    #[serde(default)]
    stochastic: bool,
    energy: EnergyStat,
    params: Vec<String>,
    #[serde(default)]
    integer: Vec<String>,
    rows: Vec<Vec<f64>>,
}

/// Immutable collection of distortion kinds.
#[derive(Debug, Clone)]
pub struct Registry {
    kinds: Vec<DistortionKind>,
}

/// Reserved id of the no-op step; not part of any category.
pub const IDENTITY: &str = "identity";

impl Registry {
    /// The registry committed in `data/registry.toml`.
    pub fn builtin() -> &'static Registry {
        static REG: OnceLock<Registry> = OnceLock::new();
        REG.get_or_init(|| Registry::parse(BUILTIN_TABLE).expect("builtin registry is valid"))
    }

    pub fn parse(text: &str) -> Result<Registry> {
        let file: TableFile =
            toml::from_str(text).map_err(|e| Error::Registry(e.message().to_string()))?;
        if file.version != 1 {
            return Err(Error::Registry(format!("unsupported version {}", file.version)));
        }
        let mut kinds = Vec::with_capacity(file.kind.len());
        for e in file.kind {
            if e.id == IDENTITY || kinds.iter().any(|k: &DistortionKind| k.id == e.id) {
                return Err(Error::Registry(format!("duplicate or reserved id `{}`", e.id)));
            }
            let op_name = e.op.as_deref().unwrap_or(&e.id);
            let op = Op::parse(op_name)
                .ok_or_else(|| Error::Registry(format!("`{}`: no kernel named `{op_name}`", e.id)))?;
            for need in op.param_names() {
                if !e.params.iter().any(|p| p == need) {
                    return Err(Error::Registry(format!("`{}` lacks parameter `{need}`", e.id)));
                }
            }
            let rows: [Vec<f64>; LEVELS] = e.rows.try_into().map_err(|r: Vec<Vec<f64>>| {
                Error::Registry(format!("`{}` has {} rows, expected {LEVELS}", e.id, r.len()))
            })?;
            if rows.iter().any(|r| r.len() != e.params.len() || r.iter().any(|v| !v.is_finite())) {
                return Err(Error::Registry(format!("`{}` has a malformed row", e.id)));
            }
            kinds.push(DistortionKind {
                id: e.id,
                name: e.name,
                category: e.category,
                stochastic: e.stochastic,
                energy: e.energy,
                params: e.params,
                integer: e.integer,
                rows,
                op,
            });
        }
        Ok(Registry { kinds })
    }

    pub fn kinds(&self) -> &[DistortionKind] {
        &self.kinds
    }

    pub fn get(&self, id: &str) -> Result<&DistortionKind> {
        self.kinds
            .iter()
            .find(|k| k.id == id)
            .ok_or_else(|| Error::UnknownKind(id.to_string()))
    }

    pub fn in_category(&self, cat: Category) -> impl Iterator<Item = &DistortionKind> {
        self.kinds.iter().filter(move |k| k.category == cat)
    }

    /// Display name for prompts; the identity step reads "no distortion".
    pub fn display_name(&self, id: &str) -> Result<&str> {
        if id == IDENTITY {
            return Ok("no distortion");
        }
        self.get(id).map(|k| k.name.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_covers_every_category_twice() {
        let reg = Registry::builtin();
        assert_eq!(reg.kinds().len(), 14);
        for cat in Category::ALL {
            assert!(reg.in_category(cat).count() >= 2, "{cat}");
        }
    }

    #[test]
    fn integer_level_is_exact_row() {
        let reg = Registry::builtin();
        for k in reg.kinds() {
            for lvl in 1..=5 {
                let p = k.level_params(lvl as f64).unwrap();
                let vals: Vec<f64> = p.iter().map(|(_, v)| v).collect();
                assert_eq!(vals, k.rows[lvl - 1], "{} level {lvl}", k.id);
            }
        }
    }

    #[test]
    fn blur_midpoint_interpolates() {
        let k = Registry::builtin().get("gaussian-blur").unwrap();
        assert_eq!(k.level_params(3.0).unwrap().get("sigma"), Some(1.2));
        let s = k.level_params(3.5).unwrap().get("sigma").unwrap();
        assert!((s - 1.8).abs() < 1e-12);
    }

    #[test]
    fn jpeg_quality_rounds_after_interpolation() {
        let k = Registry::builtin().get("jpeg-like").unwrap();
        assert_eq!(k.rows[1], vec![60.0]);
        assert_eq!(k.rows[2], vec![40.0]);
        assert_eq!(k.level_params(2.25).unwrap().get("quality"), Some(55.0));
    }

    #[test]
    fn unknown_kind_and_bad_level() {
        let reg = Registry::builtin();
        assert!(matches!(reg.get("fisheye"), Err(Error::UnknownKind(_))));
        let k = reg.get("pixelate").unwrap();
        assert!(k.level_params(0.5).is_err());
        assert!(k.level_params(5.01).is_err());
    }

    #[test]
    fn rejects_short_tables() {
        let text = r#"
            version = 1
            [[kind]]
            id = "gaussian-blur"
            name = "blur"
            category = "blur"
            energy = "mse"
            params = ["sigma"]
            rows = [[1.0], [2.0]]
        "#;
        assert!(matches!(Registry::parse(text), Err(Error::Registry(_))));
    }

    #[test]
    fn rejects_unknown_keys_and_kernels() {
        let text = r#"
            version = 1
            [[kind]]
            id = "swirl"
            name = "swirl"
            category = "spatial"
            energy = "mse"
            params = ["angle"]
            rows = [[1.0], [2.0], [3.0], [4.0], [5.0]]
        "#;
        assert!(Registry::parse(text).is_err());
        let text = text.replace("id = \"swirl\"", "id = \"swirl\"\nop = \"pixelate\"\ncolour = 1");
        assert!(Registry::parse(&text).is_err());
    }

    #[test]
    fn energy_parses_from_str() {
        assert_eq!("mse".parse::<EnergyStat>().unwrap(), EnergyStat::Mse);
        assert!("bogus".parse::<EnergyStat>().is_err());
    }
}
