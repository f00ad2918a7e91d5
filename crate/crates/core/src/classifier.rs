//! Scaled cosine classifier and the two training losses.
//!
//! Scores are `tau * cos(e, w)`; the same `tau` serves the base classes
//! (rows of `W_base`) and the per-episode novel class vectors. `tau` is stored
//! as `log tau` so it stays positive under gradient updates.

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{ops, Tape, Tensor, Var, EPS};
use crate::rng::Rng;

pub const DEFAULT_TAU: f64 = 10.0;
pub const W_BASE_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct CosineClassifier {
    pub w_base: Tensor,
    pub log_tau: f64,
}

impl CosineClassifier {
    pub fn new(base_classes: usize, dim: usize, rng: &mut Rng) -> Result<Self> {
        if base_classes == 0 || dim == 0 {
            return Err(Error::Config(
                "classifier needs at least one base class and dim > 0".into(),
            ));
        }
        let normal = Normal::new(0.0, W_BASE_INIT_STD).expect("valid std");
        let data = (0..base_classes * dim)
            .map(|_| normal.sample(rng))
            .collect();
        Ok(CosineClassifier {
            w_base: Tensor::matrix(base_classes, dim, data)?,
            log_tau: DEFAULT_TAU.ln(),
        })
    }

    pub fn tau(&self) -> f64 {
        self.log_tau.exp()
    }

    pub fn base_classes(&self) -> usize {
        self.w_base.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.w_base.shape()[1]
    }

    /// `s_k = tau * cos(e, w_k)` for every base class.
    pub fn base_scores(&self, e: &Tensor) -> Result<Tensor> {
        check_query(e, self.dim())?;
        let tau = self.tau();
        let scores = (0..self.base_classes())
            .map(|k| tau * ops::cosine_slice(e.data(), self.w_base.row(k)))
            .collect();
        ops::finite_vec("base_scores", vec![self.base_classes()], scores)
    }

    /// `s_{q,c} = tau * cos(e_q, e_c)` over an episode's class vectors.
    pub fn few_scores(&self, query: &Tensor, class_vectors: &[Tensor]) -> Result<Tensor> {
        check_query(query, self.dim())?;
        check_way(class_vectors.len())?;
        let tau = self.tau();
        let mut scores = Vec::with_capacity(class_vectors.len());
        for c in class_vectors {
            if c.len() != query.len() {
                return Err(Error::Dimension {
                    expected: query.len(),
                    found: c.len(),
                });
            }
            scores.push(tau * ops::cosine_slice(query.data(), c.data()));
        }
        ops::finite_vec("few_scores", vec![scores.len()], scores)
    }
}

fn check_query(e: &Tensor, dim: usize) -> Result<()> {
    if e.rank() != 1 || e.len() != dim {
        return Err(Error::Dimension {
            expected: dim,
            found: e.len(),
        });
    }
    if ops::norm(e) <= EPS {
        return Err(Error::InvalidArgument("cannot score a zero vector".into()));
    }
    Ok(())
}

fn check_way(c: usize) -> Result<()> {
    if c < 2 {
        return Err(Error::InvalidArgument(format!(
            "few-shot scoring needs at least 2 classes, got {c}"
        )));
    }
    Ok(())
}

/// Taped `tau * cos(e, w_k)` for every row of `w_base`.
pub fn base_scores_on(tape: &mut Tape, w_base: Var, tau: Var, e: Var) -> Result<Var> {
    if ops::norm(tape.value(e)) <= EPS {
        return Err(Error::InvalidArgument("cannot score a zero vector".into()));
    }
    let rows = tape.value(w_base).rows();
    let mut cos = Vec::with_capacity(rows);
    for k in 0..rows {
        let w = tape.row(w_base, k)?;
        cos.push(tape.cosine(e, w)?);
    }
    let stacked = tape.stack(&cos)?;
    tape.mul_scalar(tau, stacked)
}

/// Taped `tau * cos(e_q, e_c)` over class vectors.
pub fn few_scores_on(tape: &mut Tape, tau: Var, query: Var, classes: &[Var]) -> Result<Var> {
    check_way(classes.len())?;
    if ops::norm(tape.value(query)) <= EPS {
        return Err(Error::InvalidArgument("cannot score a zero vector".into()));
    }
    let cos = classes
        .iter()
        .map(|&c| tape.cosine(query, c))
        .collect::<Result<Vec<_>>>()?;
    let stacked = tape.stack(&cos)?;
    tape.mul_scalar(tau, stacked)
}

/// Cross-entropy of `softmax(scores)` against `label`.
pub fn loss_supervised(scores: &Tensor, label: usize) -> Result<f64> {
    let mut tape = Tape::new();
    let s = tape.leaf(scores.clone());
    let l = tape.cross_entropy(s, label)?;
    Ok(tape.scalar_value(l))
}

/// Mean over classes of the mean cross-entropy of that class's queries.
pub fn loss_episode(scores: &[Tensor], labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = scores.iter().map(|s| tape.leaf(s.clone())).collect();
    let l = episode_loss_on(&mut tape, &vars, labels)?;
    Ok(tape.scalar_value(l))
}

/// Taped form of [`loss_episode`].
pub fn episode_loss_on(tape: &mut Tape, scores: &[Var], labels: &[usize]) -> Result<Var> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("episode has no queries".into()));
    }
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} score vectors for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut per_class: Vec<Vec<Var>> = vec![Vec::new(); classes];
    for (&s, &y) in scores.iter().zip(labels) {
        per_class[y].push(tape.cross_entropy(s, y)?);
    }
    let class_means = per_class
        .iter()
        .filter(|q| !q.is_empty())
        .map(|q| tape.mean(q))
        .collect::<Result<Vec<_>>>()?;
    tape.mean(&class_means)
}
