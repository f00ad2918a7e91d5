use serde::{Deserialize, Serialize};

use crate::classifier::{base_scores_on, episode_loss_on, few_scores_on, CosineClassifier};
use crate::encoder::{Encoder, EncoderKind};
use crate::episodes::{Dataset, Episode, Payload};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::rng::Rng;
use crate::routing::{prepare_memory, route, RoutingConfig, RoutingParams, RoutingVars};

use super::config::{Ablation, TrainConfig};

/// Gradient per parameter tensor, keyed by name.
pub type NamedGradients = Vec<(String, Vec<f64>)>;

/// Every trainable piece of the network plus the configuration it was built from.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: TrainConfig,
    pub encoder: Encoder,
    pub classifier: CosineClassifier,
    pub dmm: RoutingParams,
    /// `None` when DMM and QIM share parameters.
    pub qim: Option<RoutingParams>,
    pub progress: Progress,
}

/// How much training a model has seen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub stage1_steps: usize,
    pub stage2_episodes: usize,
}

impl Progress {
    pub fn is_untrained(&self) -> bool {
        self.stage1_steps == 0 && self.stage2_episodes == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Group {
    Encoder,
    Classifier,
    Tau,
    Routing,
}

/// A parameter array, its tape handle and the group it trains with.
pub(crate) struct Slot<'a> {
    pub name: String,
    pub group: Group,
    pub values: &'a mut [f64],
    pub var: Var,
}

/// Tape handles for one forward pass.
pub(crate) struct Bound {
    pub projection: Option<Var>,
    pub w_base: Var,
    pub log_tau: Var,
    pub tau: Var,
    pub dmm: RoutingVars,
    pub qim: Option<RoutingVars>,
}

impl Bound {
    fn qim(&self) -> &RoutingVars {
        self.qim.as_ref().unwrap_or(&self.dmm)
    }
}

/// Scores and labels of one episode's queries.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeScores {
    pub scores: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl EpisodeScores {
    /// Index of the largest score per query; ties go to the lowest index.
    pub fn predictions(&self) -> Vec<usize> {
        self.scores.iter().map(|s| argmax(s)).collect()
    }

    pub fn accuracy(&self) -> f64 {
        let correct = self
            .predictions()
            .iter()
            .zip(&self.labels)
            .filter(|(p, y)| p == y)
            .count();
        correct as f64 / self.labels.len() as f64
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

impl Model {
    /// Fresh parameters for `base_classes` base classes.
    pub fn init(config: &TrainConfig, base_classes: usize, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.encoder.embed_dim;
        let encoder = Encoder::from_config(&config.encoder, rng)?;
        let classifier = CosineClassifier::new(base_classes, d, rng)?;
        let routing = &config.routing;
        let dmm = RoutingParams::init(&routing.dmm.resolve(d)?, routing.init, rng)?
            .scaled(routing.dmm.gain)?;
        let qim = if routing.share_params {
            None
        } else {
            Some(
                RoutingParams::init(&routing.qim.resolve(d)?, routing.init, rng)?
                    .scaled(routing.qim.gain)?,
            )
        };
        Ok(Model {
            config: config.clone(),
            encoder,
            classifier,
            dmm,
            qim,
            progress: Progress::default(),
        })
    }

    pub fn dim(&self) -> usize {
        self.encoder.dim()
    }

    pub fn dmm_config(&self) -> RoutingConfig {
        self.config
            .routing
            .dmm
            .resolve(self.dim())
            .expect("validated config")
    }

    pub fn qim_config(&self) -> RoutingConfig {
        self.config
            .routing
            .qim
            .resolve(self.dim())
            .expect("validated config")
    }

    pub fn qim_params(&self) -> &RoutingParams {
        self.qim.as_ref().unwrap_or(&self.dmm)
    }

    /// Checks internal shapes against the configuration.
    pub fn check(&self) -> Result<()> {
        self.config.validate()?;
        let d = self.config.encoder.embed_dim;
        if self.encoder.dim() != d {
            return Err(Error::Dimension {
                expected: d,
                found: self.encoder.dim(),
            });
        }
        if self.classifier.dim() != d {
            return Err(Error::Dimension {
                expected: d,
                found: self.classifier.dim(),
            });
        }
        self.dmm.check(&self.dmm_config())?;
        match (&self.qim, self.config.routing.share_params) {
            (Some(q), false) => q.check(&self.qim_config()),
            (None, true) => self.dmm.check(&self.qim_config()),
            _ => Err(Error::Config(
                "QIM parameters do not match share_params".into(),
            )),
        }
    }

    /// Checks that `dataset` can be fed to this model's encoder.
    pub fn check_data(&self, dataset: &Dataset) -> Result<()> {
        match (self.encoder.kind(), dataset.vector_dim()) {
            (EncoderKind::Precomputed, Some(found)) if found != self.dim() => {
                Err(Error::Dimension {
                    expected: self.dim(),
                    found,
                })
            }
            (EncoderKind::FeatureHash, _) if !dataset.is_text() => Err(Error::Data(
                "feature-hash encoder needs a text dataset".into(),
            )),
            _ => Ok(()),
        }
    }

    pub fn embed(&self, payload: &Payload) -> Result<Tensor> {
        self.encoder.encode(payload.as_input())
    }

    /// Adapts one embedded support vector against the base-class memory.
    pub fn adapt(&self, e: &Tensor) -> Result<Tensor> {
        crate::routing::dmm_adapt(&self.dmm, &self.dmm_config(), &self.classifier.w_base, e)
    }

    pub(crate) fn bind(&self, tape: &mut Tape) -> Result<Bound> {
        let projection = match &self.encoder {
            Encoder::FeatureHash(e) => Some(tape.leaf(e.projection().clone())),
            Encoder::Precomputed(_) => None,
        };
        let w_base = tape.leaf(self.classifier.w_base.clone());
        let log_tau = tape.leaf(Tensor::scalar(self.classifier.log_tau)?);
        let tau = tape.exp(log_tau)?;
        Ok(Bound {
            projection,
            w_base,
            log_tau,
            tau,
            dmm: self.dmm.bind(tape),
            qim: self.qim.as_ref().map(|q| q.bind(tape)),
        })
    }

    /// Parameter arrays paired with their handles in `bound`, in a fixed order.
    pub(crate) fn slots<'a>(&'a mut self, bound: &Bound) -> Vec<Slot<'a>> {
        let mut out = Vec::new();
        if let (Encoder::FeatureHash(e), Some(var)) = (&mut self.encoder, bound.projection) {
            out.push(Slot {
                name: "encoder.projection".into(),
                group: Group::Encoder,
                values: e.projection_mut().data_mut(),
                var,
            });
        }
        out.push(Slot {
            name: "classifier.w_base".into(),
            group: Group::Classifier,
            values: self.classifier.w_base.data_mut(),
            var: bound.w_base,
        });
        out.push(Slot {
            name: "classifier.log_tau".into(),
            group: Group::Tau,
            values: std::slice::from_mut(&mut self.classifier.log_tau),
            var: bound.log_tau,
        });
        let routing = std::iter::once(("dmm", &mut self.dmm, &bound.dmm)).chain(
            self.qim
                .as_mut()
                .zip(bound.qim.as_ref())
                .map(|(p, v)| ("qim", p, v)),
        );
        for (prefix, params, vars) in routing {
            let names = (0..params.weights.len())
                .map(|j| format!("{prefix}.w{j}"))
                .chain((0..params.biases.len()).map(|j| format!("{prefix}.b{j}")));
            for ((name, t), var) in names.zip(params.tensors_mut()).zip(vars.vars()) {
                out.push(Slot {
                    name,
                    group: Group::Routing,
                    values: t.data_mut(),
                    var,
                });
            }
        }
        out
    }

    /// Named parameter tensors in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        if let Encoder::FeatureHash(e) = &self.encoder {
            out.push(("encoder.projection".to_string(), e.projection().clone()));
        }
        out.push(("classifier.w_base".into(), self.classifier.w_base.clone()));
        out.push((
            "classifier.log_tau".into(),
            Tensor::scalar(self.classifier.log_tau).expect("finite tau"),
        ));
        let routing =
            std::iter::once(("dmm", &self.dmm)).chain(self.qim.as_ref().map(|q| ("qim", q)));
        for (prefix, params) in routing {
            for (j, w) in params.weights.iter().enumerate() {
                out.push((format!("{prefix}.w{j}"), w.clone()));
            }
            for (j, b) in params.biases.iter().enumerate() {
                out.push((format!("{prefix}.b{j}"), b.clone()));
            }
        }
        out
    }

    /// Replaces the parameter called `name`; the shape must match the current one.
    pub fn set_tensor(&mut self, name: &str, value: Tensor) -> Result<()> {
        if name == "classifier.log_tau" {
            self.classifier.log_tau = value.item()?;
            return Ok(());
        }
        let slot = self
            .tensor_mut(name)
            .ok_or_else(|| Error::Corrupt(format!("unknown parameter `{name}`")))?;
        if slot.shape() != value.shape() {
            let (expected, found) = slot
                .shape()
                .iter()
                .zip(value.shape())
                .find(|(a, b)| a != b)
                .map_or((slot.len(), value.len()), |(a, b)| (*a, *b));
            return Err(Error::Dimension { expected, found });
        }
        *slot = value;
        Ok(())
    }

    fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        match name {
            "encoder.projection" => match &mut self.encoder {
                Encoder::FeatureHash(e) => Some(e.projection_mut()),
                Encoder::Precomputed(_) => None,
            },
            "classifier.w_base" => Some(&mut self.classifier.w_base),
            _ => {
                let (prefix, rest) = name.split_once('.')?;
                let params = match prefix {
                    "dmm" => &mut self.dmm,
                    "qim" => self.qim.as_mut()?,
                    _ => return None,
                };
                let index: usize = rest.get(1..)?.parse().ok()?;
                match rest.as_bytes().first()? {
                    b'w' => params.weights.get_mut(index),
                    b'b' => params.biases.get_mut(index),
                    _ => None,
                }
            }
        }
    }

    pub(crate) fn encode_on(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        payload: &Payload,
    ) -> Result<Var> {
        self.encoder
            .encode_on(tape, bound.projection, payload.as_input())
    }

    /// Stage-1 logits for one item.
    pub(crate) fn base_logits_on(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        payload: &Payload,
    ) -> Result<Var> {
        let e = self.encode_on(tape, bound, payload)?;
        base_scores_on(tape, bound.w_base, bound.tau, e)
    }

    /// Records the episode's query scores; returns them with episode-local labels.
    pub(crate) fn episode_on(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        dataset: &Dataset,
        episode: &Episode,
        ablation: Ablation,
    ) -> Result<(Vec<Var>, Vec<usize>)> {
        let mut supports = Vec::with_capacity(episode.way());
        for items in &episode.support {
            let encoded = items
                .iter()
                .map(|&i| self.encode_on(tape, bound, &dataset.item(i).payload))
                .collect::<Result<Vec<_>>>()?;
            supports.push(encoded);
        }

        if ablation.uses_dmm() {
            let cfg = self.dmm_config();
            let rows = (0..self.classifier.base_classes())
                .map(|k| tape.row(bound.w_base, k))
                .collect::<Result<Vec<_>>>()?;
            let memory = prepare_memory(tape, &bound.dmm, &cfg, &rows)?;
            for class in &mut supports {
                for e in class.iter_mut() {
                    *e = route(tape, &bound.dmm, &cfg, &memory, *e, None)?;
                }
            }
        }

        let qim_cfg = self.qim_config();
        let (means, memories) = if ablation.uses_qim() {
            let memories = supports
                .iter()
                .map(|class| prepare_memory(tape, bound.qim(), &qim_cfg, class))
                .collect::<Result<Vec<_>>>()?;
            (Vec::new(), memories)
        } else {
            let means = supports
                .iter()
                .map(|class| tape.mean(class))
                .collect::<Result<Vec<_>>>()?;
            (means, Vec::new())
        };

        let mut scores = Vec::with_capacity(episode.queries.len());
        let mut labels = Vec::with_capacity(episode.queries.len());
        for &(item, label) in &episode.queries {
            let q = self.encode_on(tape, bound, &dataset.item(item).payload)?;
            let class_vectors = if ablation.uses_qim() {
                memories
                    .iter()
                    .map(|m| route(tape, bound.qim(), &qim_cfg, m, q, None))
                    .collect::<Result<Vec<_>>>()?
            } else {
                means.clone()
            };
            scores.push(few_scores_on(tape, bound.tau, q, &class_vectors)?);
            labels.push(label);
        }
        Ok((scores, labels))
    }

    /// Episode loss recorded on `tape`.
    pub(crate) fn episode_loss_on(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        dataset: &Dataset,
        episode: &Episode,
    ) -> Result<Var> {
        let (scores, labels) =
            self.episode_on(tape, bound, dataset, episode, self.config.ablation)?;
        episode_loss_on(tape, &scores, &labels)
    }

    /// Forward pass over one episode under the configured ablation.
    pub fn score_episode(&self, dataset: &Dataset, episode: &Episode) -> Result<EpisodeScores> {
        self.score_episode_with(dataset, episode, self.config.ablation)
    }

    pub fn score_episode_with(
        &self,
        dataset: &Dataset,
        episode: &Episode,
        ablation: Ablation,
    ) -> Result<EpisodeScores> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let (scores, labels) = self.episode_on(&mut tape, &bound, dataset, episode, ablation)?;
        Ok(EpisodeScores {
            scores: scores
                .iter()
                .map(|&s| tape.value(s).data().to_vec())
                .collect(),
            labels,
        })
    }

    /// Episode loss under the configured ablation.
    pub fn episode_loss(&self, dataset: &Dataset, episode: &Episode) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let loss = self.episode_loss_on(&mut tape, &bound, dataset, episode)?;
        Ok(tape.scalar_value(loss))
    }

    /// Episode loss and its gradient for every parameter, named as in [`Model::named_tensors`].
    pub fn episode_gradients(
        &self,
        dataset: &Dataset,
        episode: &Episode,
    ) -> Result<(f64, NamedGradients)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let loss = self.episode_loss_on(&mut tape, &bound, dataset, episode)?;
        let grads = tape.backward(loss)?;
        let mut scratch = self.clone();
        let named = scratch
            .slots(&bound)
            .into_iter()
            .map(|s| {
                let g = grads.get_or_zero(s.var, s.values.len());
                (s.name, g)
            })
            .collect();
        Ok((tape.scalar_value(loss), named))
    }
}
