//! Shared fixtures for the benchmarks.

use dmin_core::episodes::{
    gen_synthetic, sample_episode, Dataset, Episode, EpisodeConfig, Payload,
};
use dmin_core::harness::{Model, TrainConfig};
use dmin_core::rng::seeded;
use dmin_core::routing::{RoutingConfig, RoutingInit, RoutingParams};
use dmin_core::Tensor;

pub const DIM: usize = 32;

/// Synthetic 30-class data at [`DIM`] dimensions.
pub fn dataset() -> Dataset {
    gen_synthetic(30, 20, DIM, 6.0, 1.0, 1).expect("synthetic data")
}

/// The first `n` item vectors of `ds`.
pub fn vectors(ds: &Dataset, n: usize) -> Vec<Tensor> {
    ds.items()
        .iter()
        .take(n)
        .map(|item| match &item.payload {
            Payload::Vector(v) => Tensor::vector(v.clone()).expect("vector"),
            Payload::Text(_) => panic!("expected vector data"),
        })
        .collect()
}

/// Randomly initialised routing layer with `capsules` blocks over [`DIM`].
pub fn routing(capsules: usize, iterations: usize) -> (RoutingParams, RoutingConfig) {
    let cfg = RoutingConfig::for_dim(DIM, capsules, iterations).expect("routing config");
    let params =
        RoutingParams::init(&cfg, RoutingInit::default(), &mut seeded(3)).expect("routing init");
    (params, cfg)
}

/// Untrained model with default settings and one sampled episode.
pub fn model_and_episode(shot: usize) -> (Model, Dataset, Episode) {
    let ds = dataset();
    let mut cfg = TrainConfig::default();
    cfg.stage2.shot = shot;
    let model = Model::init(&cfg, 20, &mut seeded(5)).expect("model init");
    let ep = EpisodeConfig {
        way: 5,
        shot,
        queries: 10,
        seed: 7,
    };
    let episode = sample_episode(&ds, &ep, 0).expect("episode");
    (model, ds, episode)
}
