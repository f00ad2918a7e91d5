//! Text and vector encoders producing `d`-dimensional sample vectors.
//!
//! The feature-hash encoder lowercases, splits on whitespace, buckets every
//! token with 64-bit FNV-1a (`offset 0xcbf29ce484222325`, `prime
//! 0x100000001b3`) modulo the bucket count, L2-normalises the bucket counts,
//! multiplies by a learned `d x V` projection and applies `tanh`.
//! The precomputed encoder passes through vectors computed elsewhere.

use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::rng::Rng;

pub const FNV_OFFSET_BASIS: u64 = 0xcbf2_9ce4_8422_2325;
pub const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Standard deviation of the initial projection entries.
const PROJECTION_INIT_STD: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    FeatureHash,
    Precomputed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    #[serde(default = "default_buckets")]
    pub vocab_buckets: usize,
    pub embed_dim: usize,
}

fn default_buckets() -> usize {
    1024
}

impl EncoderConfig {
    pub fn feature_hash(vocab_buckets: usize, embed_dim: usize) -> Self {
        EncoderConfig {
            kind: EncoderKind::FeatureHash,
            vocab_buckets,
            embed_dim,
        }
    }

    pub fn precomputed(embed_dim: usize) -> Self {
        EncoderConfig {
            kind: EncoderKind::Precomputed,
            vocab_buckets: default_buckets(),
            embed_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim < 2 {
            return Err(Error::Config(format!(
                "embed_dim must be at least 2, got {}",
                self.embed_dim
            )));
        }
        if self.kind == EncoderKind::FeatureHash && self.vocab_buckets < self.embed_dim {
            return Err(Error::Config(format!(
                "vocab_buckets ({}) must be >= embed_dim ({})",
                self.vocab_buckets, self.embed_dim
            )));
        }
        Ok(())
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET_BASIS, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(FNV_PRIME)
    })
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// L2-normalised bucket counts of `text`, sorted by bucket.
pub fn hashed_features(text: &str, buckets: usize) -> Result<Vec<(usize, f64)>> {
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return Err(Error::EmptyText);
    }
    let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
    for tok in &tokens {
        let b = (fnv1a64(tok.as_bytes()) % buckets as u64) as usize;
        *counts.entry(b).or_insert(0.0) += 1.0;
    }
    let norm = counts.values().map(|c| c * c).sum::<f64>().sqrt();
    Ok(counts.into_iter().map(|(b, c)| (b, c / norm)).collect())
}

/// An encoder input: raw text, an id into a precomputed table, or a ready vector.
#[derive(Clone, Copy, Debug)]
pub enum Input<'a> {
    Text(&'a str),
    Id(&'a str),
    Vector(&'a [f64]),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureHashEncoder {
    projection: Tensor,
    config: EncoderConfig,
}

impl FeatureHashEncoder {
    pub fn new(config: EncoderConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let normal = Normal::new(0.0, PROJECTION_INIT_STD).expect("valid std");
        let (d, v) = (config.embed_dim, config.vocab_buckets);
        let data = (0..d * v).map(|_| normal.sample(rng)).collect();
        Ok(FeatureHashEncoder {
            projection: Tensor::matrix(d, v, data)?,
            config,
        })
    }

    pub fn with_projection(config: EncoderConfig, projection: Tensor) -> Result<Self> {
        config.validate()?;
        let expected = [config.embed_dim, config.vocab_buckets];
        if projection.shape() != expected {
            return Err(Error::shape(
                "feature_hash",
                format!(
                    "projection {:?}, expected {:?}",
                    projection.shape(),
                    expected
                ),
            ));
        }
        Ok(FeatureHashEncoder { projection, config })
    }

    pub fn projection(&self) -> &Tensor {
        &self.projection
    }

    pub(crate) fn projection_mut(&mut self) -> &mut Tensor {
        &mut self.projection
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn encode(&self, text: &str) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = tape.leaf(self.projection.clone());
        let out = self.encode_on(&mut tape, p, text)?;
        Ok(tape.value(out).clone())
    }

    pub(crate) fn encode_on(&self, tape: &mut Tape, projection: Var, text: &str) -> Result<Var> {
        let features = hashed_features(text, self.config.vocab_buckets)?;
        let projected = tape.sparse_matvec(projection, features)?;
        tape.tanh(projected)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PrecomputedEncoder {
    dim: usize,
    table: BTreeMap<String, Tensor>,
}

impl PrecomputedEncoder {
    pub fn new(dim: usize) -> Self {
        PrecomputedEncoder {
            dim,
            table: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, id: impl Into<String>, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                found: vector.len(),
            });
        }
        self.table.insert(id.into(), Tensor::vector(vector)?);
        Ok(())
    }

    pub fn table(&self) -> &BTreeMap<String, Tensor> {
        &self.table
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lookup(&self, id: &str) -> Result<&Tensor> {
        self.table
            .get(id)
            .ok_or_else(|| Error::UnknownItem(id.to_string()))
    }

    fn check_vector(&self, v: &[f64]) -> Result<Tensor> {
        if v.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                found: v.len(),
            });
        }
        Tensor::vector(v.to_vec())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Encoder {
    FeatureHash(FeatureHashEncoder),
    Precomputed(PrecomputedEncoder),
}

impl Encoder {
    pub fn from_config(config: &EncoderConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        Ok(match config.kind {
            EncoderKind::FeatureHash => {
                Encoder::FeatureHash(FeatureHashEncoder::new(config.clone(), rng)?)
            }
            EncoderKind::Precomputed => {
                Encoder::Precomputed(PrecomputedEncoder::new(config.embed_dim))
            }
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            Encoder::FeatureHash(e) => e.config.embed_dim,
            Encoder::Precomputed(e) => e.dim,
        }
    }

    pub fn kind(&self) -> EncoderKind {
        match self {
            Encoder::FeatureHash(_) => EncoderKind::FeatureHash,
            Encoder::Precomputed(_) => EncoderKind::Precomputed,
        }
    }

    /// `e = E(x | theta)`.
    pub fn encode(&self, input: Input<'_>) -> Result<Tensor> {
        match (self, input) {
            (Encoder::FeatureHash(e), Input::Text(t)) => e.encode(t),
            (Encoder::Precomputed(e), Input::Id(id)) => e.lookup(id).cloned(),
            (Encoder::Precomputed(e), Input::Vector(v)) => e.check_vector(v),
            (Encoder::Precomputed(e), Input::Text(id)) => e.lookup(id).cloned(),
            (Encoder::FeatureHash(_), other) => Err(Error::InvalidArgument(format!(
                "feature-hash encoder needs text, got {other:?}"
            ))),
        }
    }

    pub fn encode_batch(&self, items: &[Input<'_>]) -> Result<Vec<Tensor>> {
        items
            .iter()
            .enumerate()
            .map(|(index, item)| {
                self.encode(*item).map_err(|e| Error::Batch {
                    index,
                    source: Box::new(e),
                })
            })
            .collect()
    }

    /// Records the encoding on `tape`; `projection` is the bound projection for feature hashing.
    pub(crate) fn encode_on(
        &self,
        tape: &mut Tape,
        projection: Option<Var>,
        input: Input<'_>,
    ) -> Result<Var> {
        match (self, projection) {
            (Encoder::FeatureHash(e), Some(p)) => match input {
                Input::Text(t) => e.encode_on(tape, p, t),
                other => Err(Error::InvalidArgument(format!(
                    "feature-hash encoder needs text, got {other:?}"
                ))),
            },
            _ => {
                let v = self.encode(input)?;
                Ok(tape.leaf(v))
            }
        }
    }
}
