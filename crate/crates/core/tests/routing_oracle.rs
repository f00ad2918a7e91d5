mod common;

use std::time::Instant;

use common::{max_abs_diff, oracle_dmr_params, random_params, rng, tensors, uniform_vec};
use dmin_core::classifier::CosineClassifier;
use dmin_core::routing::{
    dmm_adapt, dmr, dmr_traced, qim_induce, RoutingConfig, RoutingInit, RoutingParams,
};
use dmin_core::Tensor;
use rand::Rng as _;

fn cfg(input_dim: usize, capsules: usize, capsule_dim: usize, iterations: usize) -> RoutingConfig {
    RoutingConfig {
        iterations,
        capsules,
        capsule_dim,
        input_dim,
    }
}

#[test]
fn hundred_random_instances_match_the_oracle() {
    let start = Instant::now();
    let mut r = rng(2024);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = r.random_range(1..=8);
        let din = r.random_range(2..=16);
        let l = r.random_range(1..=4);
        let dv = r.random_range(2..=6);
        let iters = r.random_range(1..=3);
        let c = cfg(din, l, dv, iters);
        let params = random_params(&mut r, &c, 1.0);
        let memory: Vec<Vec<f64>> = (0..n).map(|_| uniform_vec(&mut r, din, 2.0)).collect();
        let q = uniform_vec(&mut r, din, 2.0);
        let got = dmr(
            &params,
            &c,
            &tensors(&memory),
            &Tensor::vector(q.clone()).unwrap(),
        )
        .unwrap();
        let want = oracle_dmr_params(&params, &c, &memory, &q);
        worst = worst.max(max_abs_diff(got.data(), &want));
    }
    assert!(worst <= 1e-12, "worst deviation {worst:e}");
    assert!(start.elapsed().as_secs_f64() < 10.0);
}

#[test]
fn seed_42_minimal_instance() {
    let mut r = rng(42);
    let c = cfg(3, 1, 3, 1);
    let params = random_params(&mut r, &c, 1.0);
    let memory: Vec<Vec<f64>> = (0..2).map(|_| uniform_vec(&mut r, 3, 1.0)).collect();
    let q = uniform_vec(&mut r, 3, 1.0);
    let got = dmr(
        &params,
        &c,
        &tensors(&memory),
        &Tensor::vector(q.clone()).unwrap(),
    )
    .unwrap();
    let want = oracle_dmr_params(&params, &c, &memory, &q);
    assert_eq!(got.len(), 3);
    assert!(max_abs_diff(got.data(), &want) <= 1e-12);
}

#[test]
fn dmm_fixture_twenty_base_rows() {
    let mut r = rng(7);
    let classifier = CosineClassifier::new(20, 32, &mut r).unwrap();
    let c = RoutingConfig::for_dim(32, 4, 3).unwrap();
    let params = RoutingParams::init(&c, RoutingInit::default(), &mut r)
        .unwrap()
        .scaled(20.0)
        .unwrap();
    let e = uniform_vec(&mut r, 32, 1.0);
    let got = dmm_adapt(
        &params,
        &c,
        &classifier.w_base,
        &Tensor::vector(e.clone()).unwrap(),
    )
    .unwrap();
    let rows: Vec<Vec<f64>> = (0..20).map(|k| classifier.w_base.row(k).to_vec()).collect();
    let want = oracle_dmr_params(&params, &c, &rows, &e);
    assert!(max_abs_diff(got.data(), &want) <= 1e-12);
    assert!(
        got.data().iter().any(|x| x.abs() > 1e-6),
        "adapted vector should not vanish"
    );

    let again = dmm_adapt(&params, &c, &classifier.w_base, &Tensor::vector(e).unwrap()).unwrap();
    assert_eq!(got, again);
}

#[test]
fn qim_fixture_five_shot() {
    let mut r = rng(11);
    let c = RoutingConfig::for_dim(32, 4, 3).unwrap();
    let params = random_params(&mut r, &c, 0.5);
    let supports: Vec<Vec<f64>> = (0..5).map(|_| uniform_vec(&mut r, 32, 1.0)).collect();
    let q = uniform_vec(&mut r, 32, 1.0);
    let got = qim_induce(
        &params,
        &c,
        &tensors(&supports),
        &Tensor::vector(q.clone()).unwrap(),
    )
    .unwrap();
    let want = oracle_dmr_params(&params, &c, &supports, &q);
    assert!(max_abs_diff(got.data(), &want) <= 1e-12);
}

#[test]
fn single_base_row_is_finite() {
    let mut r = rng(3);
    let c = cfg(6, 3, 2, 3);
    let params = random_params(&mut r, &c, 1.0);
    let w = Tensor::matrix(1, 6, uniform_vec(&mut r, 6, 1.0)).unwrap();
    let out = dmm_adapt(
        &params,
        &c,
        &w,
        &Tensor::vector(uniform_vec(&mut r, 6, 1.0)).unwrap(),
    )
    .unwrap();
    assert!(out.data().iter().all(|x| x.is_finite()));
}

#[test]
fn zero_parameters_give_zero_output() {
    let c = cfg(5, 2, 3, 3);
    let params = RoutingParams::zeros(&c);
    let memory = tensors(&[
        vec![1.0, 2.0, 3.0, 4.0, 5.0],
        vec![-1.0, 0.0, 2.0, 0.5, 1.0],
    ]);
    let out = dmr(&params, &c, &memory, &Tensor::vector(vec![0.3; 5]).unwrap()).unwrap();
    assert_eq!(out.data(), &[0.0; 6]);
}

#[test]
fn one_shot_query_conditioning() {
    let mut r = rng(5);
    let c = cfg(8, 2, 4, 3);
    let params = random_params(&mut r, &c, 1.0);
    let support = tensors(&[uniform_vec(&mut r, 8, 1.0)]);
    let q1 = Tensor::vector(uniform_vec(&mut r, 8, 1.0)).unwrap();
    let q2 = Tensor::vector(uniform_vec(&mut r, 8, 1.0)).unwrap();
    let (a, trace) = dmr_traced(&params, &c, &support, &q1).unwrap();
    let b = qim_induce(&params, &c, &support, &q2).unwrap();
    assert_ne!(a, b);
    assert_eq!(trace.couplings[0][0], vec![0.5, 0.5]);
}

#[test]
fn duplicated_supports_are_swap_invariant() {
    let mut r = rng(6);
    let c = cfg(8, 2, 4, 3);
    let params = random_params(&mut r, &c, 1.0);
    let s = uniform_vec(&mut r, 8, 1.0);
    let other = uniform_vec(&mut r, 8, 1.0);
    let q = Tensor::vector(uniform_vec(&mut r, 8, 1.0)).unwrap();
    let twice = tensors(&[s.clone(), s.clone()]);
    assert_eq!(
        qim_induce(&params, &c, &twice, &q).unwrap(),
        qim_induce(&params, &c, &twice, &q).unwrap()
    );
    let ab = qim_induce(&params, &c, &tensors(&[s.clone(), other.clone()]), &q).unwrap();
    let ba = qim_induce(&params, &c, &tensors(&[other, s]), &q).unwrap();
    assert_eq!(ab, ba);
}
