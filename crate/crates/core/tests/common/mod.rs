//! Straight-line reference implementations used as test oracles, plus shared fixtures.
//!
//! The oracles never call into the library's numeric kernels: every formula is
//! written out on plain `Vec<f64>` so a mistake in the crate cannot hide in a
//! shared helper.

#![allow(dead_code)]

use dmin_core::encoder::EncoderConfig;
use dmin_core::episodes::{sample_episode, Dataset, Episode, EpisodeConfig, Item, Payload};
use dmin_core::harness::{Model, TrainConfig};
use dmin_core::rng::{seeded, Rng};
use dmin_core::routing::{RoutingConfig, RoutingParams};
use dmin_core::Tensor;
use rand::Rng as _;

pub fn uniform_vec(rng: &mut Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn random_params(rng: &mut Rng, cfg: &RoutingConfig, scale: f64) -> RoutingParams {
    let (dv, din) = (cfg.capsule_dim, cfg.input_dim);
    RoutingParams {
        weights: (0..cfg.capsules)
            .map(|_| Tensor::matrix(dv, din, uniform_vec(rng, dv * din, scale)).unwrap())
            .collect(),
        biases: (0..cfg.capsules)
            .map(|_| Tensor::vector(uniform_vec(rng, dv, scale)).unwrap())
            .collect(),
    }
}

pub fn tensors(vs: &[Vec<f64>]) -> Vec<Tensor> {
    vs.iter()
        .map(|v| Tensor::vector(v.clone()).unwrap())
        .collect()
}

fn squash(x: &[f64]) -> Vec<f64> {
    let s: f64 = x.iter().map(|v| v * v).sum();
    let factor = s / ((1.0 + s) * (s + 1e-12).sqrt());
    x.iter().map(|v| factor * v).collect()
}

fn pcc(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for k in 0..a.len() {
        cov += (a[k] - ma) * (b[k] - mb);
        va += (a[k] - ma) * (a[k] - ma);
        vb += (b[k] - mb) * (b[k] - mb);
    }
    if va.sqrt() <= 1e-12 || vb.sqrt() <= 1e-12 {
        return 0.0;
    }
    cov / (va.sqrt() * vb.sqrt())
}

/// One routing call written out loop by loop, memory in the order given.
pub fn oracle_dmr(
    w: &[Vec<Vec<f64>>],
    b: &[Vec<f64>],
    memory: &[Vec<f64>],
    q: &[f64],
    iterations: usize,
) -> Vec<f64> {
    let l = w.len();
    let n = memory.len();
    let affine = |j: usize, x: &[f64]| -> Vec<f64> {
        w[j].iter()
            .zip(&b[j])
            .map(|(row, bias)| row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>() + bias)
            .collect()
    };
    let mut m_hat = vec![vec![Vec::new(); l]; n];
    for i in 0..n {
        for j in 0..l {
            m_hat[i][j] = squash(&affine(j, &memory[i]));
        }
    }
    let mut q_hat: Vec<Vec<f64>> = (0..l).map(|j| squash(&affine(j, q))).collect();
    let mut alpha = vec![vec![0.0; l]; n];
    let mut p = vec![vec![0.0; l]; n];
    for i in 0..n {
        for j in 0..l {
            p[i][j] = pcc(&m_hat[i][j], &q_hat[j]).tanh();
        }
    }
    let mut v = vec![Vec::new(); l];
    for _ in 0..iterations {
        let mut d = vec![vec![0.0; l]; n];
        for i in 0..n {
            let max = alpha[i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = alpha[i].iter().map(|a| (a - max).exp()).sum();
            for j in 0..l {
                d[i][j] = (alpha[i][j] - max).exp() / z;
            }
        }
        for j in 0..l {
            let dv = m_hat[0][j].len();
            let mut acc = vec![0.0; dv];
            for i in 0..n {
                for k in 0..dv {
                    acc[k] += (d[i][j] + p[i][j]) * m_hat[i][j][k];
                }
            }
            v[j] = squash(&acc);
        }
        for i in 0..n {
            for j in 0..l {
                let agree: f64 = m_hat[i][j].iter().zip(&v[j]).map(|(a, c)| a * c).sum();
                alpha[i][j] += p[i][j] * agree;
            }
        }
        for j in 0..l {
            for k in 0..q_hat[j].len() {
                q_hat[j][k] = (q_hat[j][k] + v[j][k]) / 2.0;
            }
        }
        for i in 0..n {
            for j in 0..l {
                p[i][j] = pcc(&m_hat[i][j], &q_hat[j]).tanh();
            }
        }
    }
    v.concat()
}

/// Unpacks `params` into nested vectors for [`oracle_dmr`].
pub fn unpack(params: &RoutingParams) -> (Vec<Vec<Vec<f64>>>, Vec<Vec<f64>>) {
    let w = params
        .weights
        .iter()
        .map(|t| (0..t.rows()).map(|r| t.row(r).to_vec()).collect())
        .collect();
    let b = params.biases.iter().map(|t| t.data().to_vec()).collect();
    (w, b)
}

pub fn oracle_dmr_params(
    params: &RoutingParams,
    cfg: &RoutingConfig,
    memory: &[Vec<f64>],
    q: &[f64],
) -> Vec<f64> {
    let (w, b) = unpack(params);
    oracle_dmr(&w, &b, memory, q, cfg.iterations)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// `tau * <a/|a|, b/|b|>`.
pub fn oracle_cosine_score(tau: f64, a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let ua: Vec<f64> = a.iter().map(|x| x / na).collect();
    let ub: Vec<f64> = b.iter().map(|x| x / nb).collect();
    tau * ua.iter().zip(&ub).map(|(x, y)| x * y).sum::<f64>()
}

pub fn vector(ds: &Dataset, i: usize) -> &[f64] {
    match &ds.item(i).payload {
        Payload::Vector(v) => v,
        Payload::Text(_) => panic!("expected a vector dataset"),
    }
}

fn first_argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..xs.len() {
        if xs[i] > xs[best] {
            best = i;
        }
    }
    best
}

/// Prototypical classifier: cosine to the mean of each class's raw support vectors.
pub fn prototype_accuracy(ds: &Dataset, episode: &Episode) -> f64 {
    let protos: Vec<Vec<f64>> = episode
        .support
        .iter()
        .map(|items| {
            let d = vector(ds, items[0]).len();
            let mut mean = vec![0.0; d];
            for &i in items {
                for (m, x) in mean.iter_mut().zip(vector(ds, i)) {
                    *m += x / items.len() as f64;
                }
            }
            mean
        })
        .collect();
    let mut correct = 0;
    for &(i, label) in &episode.queries {
        let q = vector(ds, i);
        let scores: Vec<f64> = protos
            .iter()
            .map(|p| oracle_cosine_score(1.0, q, p))
            .collect();
        if first_argmax(&scores) == label {
            correct += 1;
        }
    }
    correct as f64 / episode.queries.len() as f64
}

/// Euclidean nearest-centre accuracy on held-out items.
///
/// Centres are class means of the first `fit_per_class` items of each class;
/// every remaining item is classified.
pub fn nearest_centre_accuracy(ds: &Dataset, fit_per_class: usize) -> f64 {
    let centres: Vec<Vec<f64>> = (0..ds.num_classes())
        .map(|c| {
            let items = &ds.class_items(c)[..fit_per_class];
            let d = vector(ds, items[0]).len();
            let mut mean = vec![0.0; d];
            for &i in items {
                for (m, x) in mean.iter_mut().zip(vector(ds, i)) {
                    *m += x / items.len() as f64;
                }
            }
            mean
        })
        .collect();
    let mut correct = 0;
    let mut total = 0;
    for c in 0..ds.num_classes() {
        for &i in &ds.class_items(c)[fit_per_class..] {
            let x = vector(ds, i);
            let dist: Vec<f64> = centres
                .iter()
                .map(|m| -m.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                .collect();
            correct += usize::from(first_argmax(&dist) == c);
            total += 1;
        }
    }
    correct as f64 / total as f64
}

/// Mean silhouette by direct pairwise distances.
pub fn brute_silhouette(points: &[Vec<f64>], labels: &[usize]) -> f64 {
    let dist = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let mut total = 0.0;
    for i in 0..points.len() {
        let mut own = Vec::new();
        let mut others: std::collections::BTreeMap<usize, Vec<f64>> = Default::default();
        for j in 0..points.len() {
            if i == j {
                continue;
            }
            let dij = dist(&points[i], &points[j]);
            if labels[j] == labels[i] {
                own.push(dij);
            } else {
                others.entry(labels[j]).or_default().push(dij);
            }
        }
        let a = if own.is_empty() {
            0.0
        } else {
            own.iter().sum::<f64>() / own.len() as f64
        };
        let b = others
            .values()
            .map(|ds| ds.iter().sum::<f64>() / ds.len() as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        total += if m > 0.0 { (b - a) / m } else { 0.0 };
    }
    total / points.len() as f64
}

pub fn rng(seed: u64) -> Rng {
    seeded(seed)
}

/// Central-difference agreement: absolute error within `1e-7` or relative within `1e-4`.
pub fn grad_close(analytic: f64, numeric: f64) -> bool {
    let err = (analytic - numeric).abs();
    err <= 1e-7 || err / analytic.abs().max(numeric.abs()) <= 1e-4
}

fn text_dataset() -> Dataset {
    let words = [
        [
            "alpha beta gamma",
            "beta gamma delta",
            "alpha alpha delta",
            "gamma beta alpha",
            "delta alpha",
        ],
        [
            "red green blue",
            "green blue cyan",
            "red red cyan",
            "blue green",
            "cyan red green",
        ],
        [
            "one two three",
            "two three four",
            "one four four",
            "three two",
            "four one two",
        ],
    ];
    let mut items = Vec::new();
    for (label, texts) in words.iter().enumerate() {
        for t in texts {
            items.push(Item {
                label,
                payload: Payload::Text(t.to_string()),
            });
        }
    }
    Dataset::new(
        vec!["greek".into(), "colour".into(), "number".into()],
        items,
    )
    .unwrap()
}

/// Seed-42 text model with d=8 and a 3-way 2-shot episode.
pub fn micro_instance() -> (Model, Dataset, Episode) {
    let mut cfg = TrainConfig::default();
    cfg.encoder = EncoderConfig::feature_hash(16, 8);
    cfg.routing.dmm.capsules = 2;
    cfg.routing.qim.capsules = 2;
    cfg.stage2.way = 3;
    cfg.stage2.shot = 2;
    cfg.stage2.queries = 2;
    let model = Model::init(&cfg, 4, &mut seeded(42)).unwrap();
    let ds = text_dataset();
    let episode_cfg = EpisodeConfig {
        way: 3,
        shot: 2,
        queries: 2,
        seed: 42,
    };
    let episode = sample_episode(&ds, &episode_cfg, 0).unwrap();
    (model, ds, episode)
}

pub struct FdCheck {
    pub checked: usize,
    pub nonzero: usize,
    pub failures: Vec<String>,
}

/// Central differences (h = 1e-5) of the episode loss for every parameter coordinate.
pub fn end_to_end_fd(model: &Model, ds: &Dataset, episode: &Episode) -> FdCheck {
    const H: f64 = 1e-5;
    let (_, grads) = model.episode_gradients(ds, episode).unwrap();
    let mut out = FdCheck {
        checked: 0,
        nonzero: 0,
        failures: Vec::new(),
    };
    for ((name, tensor), (_, analytic)) in model.named_tensors().into_iter().zip(&grads) {
        for k in 0..tensor.len() {
            let eval_at = |delta: f64| {
                let mut data = tensor.data().to_vec();
                data[k] += delta;
                let mut m = model.clone();
                m.set_tensor(&name, Tensor::new(tensor.shape().to_vec(), data).unwrap())
                    .unwrap();
                m.episode_loss(ds, episode).unwrap()
            };
            let numeric = (eval_at(H) - eval_at(-H)) / (2.0 * H);
            if !grad_close(analytic[k], numeric) {
                out.failures.push(format!(
                    "{name}[{k}]: analytic {} numeric {numeric}",
                    analytic[k]
                ));
            }
            out.checked += 1;
            out.nonzero += usize::from(analytic[k].abs() > 1e-9);
        }
    }
    out
}
