//! Opinion-unaware image quality assessment at desk scale.
//!
//! The pipeline: pristine images are cropped and degraded by seeded
//! [`distort::Recipe`]s, summarized into per-patch statistics by
//! [`features`], scored by the attention-pooled [`model`], and trained with
//! the pair-of-pairs ranking, embedding-distance and image-text alignment
//! objectives in [`losses`]. [`eval`] computes rank and linear correlation and
//! score-distribution overlap.

pub mod config;
pub mod data;
pub mod distort;
pub mod error;
pub mod eval;
pub mod features;
pub mod imgproc;
pub mod losses;
pub mod model;
pub mod prompts;
pub mod rng;
pub mod synth;
pub mod train;

pub use error::{Error, Result};

/// Serde adapter writing `u64` seeds as decimal strings.
pub mod seed_str {
    use serde::{de::Error as _, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(|_| D::Error::custom(format!("seed `{s}` is not a decimal u64")))
    }
}
