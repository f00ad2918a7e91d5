use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::episodes::{sample_episode, Dataset, EpisodeConfig};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream};

use super::config::{digest_hex, Ablation, TrainConfig};
use super::model::Model;

/// Environment variable capping the number of evaluation threads.
pub const THREADS_ENV: &str = "DMIN_THREADS";

/// Evaluation protocol: E episodes of C-way K-shot with L queries per class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub episodes: usize,
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    pub seed: u64,
}

impl EvalOptions {
    /// Episode count and queries from `eval`, way and shot from `stage2`.
    pub fn from_config(config: &TrainConfig) -> Self {
        EvalOptions {
            episodes: config.eval.episodes,
            way: config.stage2.way,
            shot: config.stage2.shot,
            queries: config.eval.queries_per_class,
            seed: config.seed,
        }
    }

    pub fn episode_config(&self) -> EpisodeConfig {
        EpisodeConfig {
            way: self.way,
            shot: self.shot,
            queries: self.queries,
            seed: derive_seed(self.seed, stream::EVAL_EPISODE),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_accuracy: f64,
    /// Sample standard deviation; 0 when only one episode ran.
    pub std_accuracy: f64,
    /// False when `std_accuracy` is undefined (a single episode).
    pub std_defined: bool,
    pub episodes: usize,
    pub per_episode: Vec<f64>,
    pub config_hash: String,
    pub wall_time_ms: u64,
}

impl EvalReport {
    pub fn from_accuracies(per_episode: Vec<f64>, config_hash: String, wall_time_ms: u64) -> Self {
        let n = per_episode.len();
        let mean = per_episode.iter().sum::<f64>() / n as f64;
        let (std, defined) = if n > 1 {
            let ss: f64 = per_episode.iter().map(|a| (a - mean).powi(2)).sum();
            ((ss / (n - 1) as f64).sqrt(), true)
        } else {
            (0.0, false)
        };
        EvalReport {
            mean_accuracy: mean,
            std_accuracy: std,
            std_defined: defined,
            episodes: n,
            per_episode,
            config_hash,
            wall_time_ms,
        }
    }

    /// Equality on everything except timing.
    pub fn same_results(&self, other: &EvalReport) -> bool {
        self.per_episode == other.per_episode
            && self.config_hash == other.config_hash
            && self.mean_accuracy == other.mean_accuracy
            && self.std_accuracy == other.std_accuracy
            && self.std_defined == other.std_defined
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

/// Digest of the model configuration together with the evaluation protocol.
pub fn eval_hash(config: &TrainConfig, options: &EvalOptions, ablation: Ablation) -> String {
    let text = serde_json::json!({
        "config": config,
        "eval": options,
        "ablation": ablation,
    });
    digest_hex(text.to_string().as_bytes())
}

fn thread_cap() -> Option<usize> {
    let raw = std::env::var(THREADS_ENV).ok()?;
    match raw.trim().parse::<usize>() {
        Ok(n) if n > 0 => Some(n),
        _ => {
            log::warn!("ignoring {THREADS_ENV}={raw:?}; expected a positive integer");
            None
        }
    }
}

/// Runs `f` on a pool capped by `DMIN_THREADS`, or the global pool if unset.
pub(crate) fn with_eval_pool<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T> {
    match thread_cap() {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

/// Evaluates under the model's configured ablation.
pub fn evaluate(model: &Model, test: &Dataset, options: &EvalOptions) -> Result<EvalReport> {
    evaluate_with(model, test, options, model.config.ablation)
}

/// Accuracy per episode, in episode order; episodes run in parallel.
pub fn evaluate_with(
    model: &Model,
    test: &Dataset,
    options: &EvalOptions,
    ablation: Ablation,
) -> Result<EvalReport> {
    if options.episodes == 0 {
        return Err(Error::Config(
            "evaluation needs at least one episode".into(),
        ));
    }
    model.check_data(test)?;
    let ep_cfg = options.episode_config();
    // Fail on insufficient data before spawning work.
    sample_episode(test, &ep_cfg, 0)?;
    let start = Instant::now();
    let accuracies = with_eval_pool(|| {
        (0..options.episodes)
            .into_par_iter()
            .map(|i| {
                let episode = sample_episode(test, &ep_cfg, i as u64)?;
                Ok(model
                    .score_episode_with(test, &episode, ablation)?
                    .accuracy())
            })
            .collect::<Result<Vec<f64>>>()
    })??;
    let elapsed = start.elapsed().as_millis() as u64;
    Ok(EvalReport::from_accuracies(
        accuracies,
        eval_hash(&model.config, options, ablation),
        elapsed,
    ))
}
