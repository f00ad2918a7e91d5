use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::routing::{RoutingConfig, RoutingInit};

/// Which parts of the routing pipeline are active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    /// Supports are used unadapted.
    NoDmm,
    /// Class vector is the mean of the adapted supports.
    NoQim,
    /// Both removed: a mean-of-supports cosine classifier.
    NoDmmNoQim,
}

impl Ablation {
    pub fn uses_dmm(self) -> bool {
        matches!(self, Ablation::Full | Ablation::NoQim)
    }

    pub fn uses_qim(self) -> bool {
        matches!(self, Ablation::Full | Ablation::NoDmm)
    }
}

/// Where meta-training episodes are drawn from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaSource {
    /// The base classes used in pre-training.
    #[default]
    Base,
    /// A slice of the novel classes held apart from evaluation.
    NovelTrain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Config {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Config {
    pub episodes: usize,
    pub learning_rate: f64,
    #[serde(rename = "C")]
    pub way: usize,
    #[serde(rename = "K")]
    pub shot: usize,
    #[serde(rename = "L")]
    pub queries: usize,
    #[serde(default)]
    pub freeze_tau: bool,
}

/// Routing shape for one module; capsule size is `embed_dim / capsules`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingSettings {
    pub iterations: usize,
    pub capsules: usize,
    /// Scale applied to the initial transforms.
    #[serde(default = "unit_gain")]
    pub gain: f64,
}

fn unit_gain() -> f64 {
    1.0
}

impl RoutingSettings {
    pub fn resolve(&self, dim: usize) -> Result<RoutingConfig> {
        RoutingConfig::for_dim(dim, self.capsules, self.iterations)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingSection {
    pub dmm: RoutingSettings,
    pub qim: RoutingSettings,
    #[serde(default)]
    pub share_params: bool,
    #[serde(default)]
    pub init: RoutingInit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSection {
    pub episodes: usize,
    pub queries_per_class: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSection {
    /// Classes assigned to pre-training; the rest are novel.
    pub num_base: usize,
    #[serde(default)]
    pub meta_source: MetaSource,
    /// Novel classes reserved for meta-training when `meta_source` is `novel_train`.
    #[serde(default)]
    pub novel_train_classes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub data: DataSection,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub routing: RoutingSection,
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub ablation: Ablation,
    pub eval: EvalSection,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 1,
            data: DataSection {
                num_base: 20,
                meta_source: MetaSource::Base,
                novel_train_classes: 0,
            },
            stage1: Stage1Config {
                steps: 2000,
                batch_size: 32,
                learning_rate: 1e-3,
            },
            stage2: Stage2Config {
                episodes: 1000,
                learning_rate: 1e-4,
                way: 5,
                shot: 1,
                queries: 10,
                freeze_tau: false,
            },
            routing: RoutingSection {
                // Base rows start near norm 0.02 * sqrt(d); the gain lifts their
                // capsule blocks to unit scale so squash does not flatten them.
                dmm: RoutingSettings {
                    iterations: 3,
                    capsules: 4,
                    gain: 20.0,
                },
                qim: RoutingSettings {
                    iterations: 3,
                    capsules: 4,
                    gain: 1.0,
                },
                share_params: false,
                init: RoutingInit::default(),
            },
            encoder: EncoderConfig::precomputed(32),
            ablation: Ablation::Full,
            eval: EvalSection {
                episodes: 100,
                queries_per_class: 10,
            },
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        TrainConfig::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: usize| {
            if v == 0 {
                Err(Error::Config(format!("{name} must be positive")))
            } else {
                Ok(())
            }
        };
        positive("stage1.batch_size", self.stage1.batch_size)?;
        positive("stage2.K", self.stage2.shot)?;
        positive("stage2.L", self.stage2.queries)?;
        positive("eval.episodes", self.eval.episodes)?;
        positive("eval.queries_per_class", self.eval.queries_per_class)?;
        positive("data.num_base", self.data.num_base)?;
        if self.stage2.way < 2 {
            return Err(Error::Config("stage2.C must be at least 2".into()));
        }
        for (name, lr) in [
            ("stage1", self.stage1.learning_rate),
            ("stage2", self.stage2.learning_rate),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!(
                    "{name}.learning_rate must be positive"
                )));
            }
        }
        if self.data.meta_source == MetaSource::NovelTrain && self.data.novel_train_classes == 0 {
            return Err(Error::Config(
                "meta_source novel_train needs data.novel_train_classes > 0".into(),
            ));
        }
        self.encoder.validate()?;
        let d = self.encoder.embed_dim;
        self.routing.dmm.resolve(d)?;
        self.routing.qim.resolve(d)?;
        for (name, g) in [
            ("dmm", self.routing.dmm.gain),
            ("qim", self.routing.qim.gain),
        ] {
            if !(g > 0.0 && g.is_finite()) {
                return Err(Error::Config(format!(
                    "routing.{name}.gain must be positive"
                )));
            }
        }
        if self.routing.share_params && self.routing.dmm.capsules != self.routing.qim.capsules {
            return Err(Error::Config(
                "share_params needs the same capsule count for DMM and QIM".into(),
            ));
        }
        Ok(())
    }

    /// Short stable digest of the configuration.
    pub fn hash(&self) -> String {
        digest_hex(
            serde_json::to_string(self)
                .expect("config serialises")
                .as_bytes(),
        )
    }
}

pub(crate) fn digest_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}
