mod common;

use common::{end_to_end_fd, grad_close, micro_instance, random_params, rng, uniform_vec};
use dmin_core::routing::{dmr_on, RoutingConfig, RoutingVars};
use dmin_core::{Tape, Tensor, Var};
use proptest::prelude::*;

const H: f64 = 1e-5;

/// Builds a scalar from the leaves on a fresh tape.
type Graph<'a> = dyn Fn(&mut Tape, &[Var]) -> Var + 'a;

fn value(inputs: &[Tensor], f: &Graph) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&mut tape, &vars);
    tape.scalar_value(out)
}

fn nudged(inputs: &[Tensor], a: usize, k: usize, delta: f64) -> Vec<Tensor> {
    let mut out = inputs.to_vec();
    let mut data = out[a].data().to_vec();
    data[k] += delta;
    out[a] = Tensor::new(out[a].shape().to_vec(), data).unwrap();
    out
}

/// Compares reverse-mode gradients with central differences for every input coordinate.
fn check(inputs: &[Tensor], f: &Graph) -> Result<(), TestCaseError> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out).unwrap();
    for (a, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zero(*var, inputs[a].len());
        for k in 0..inputs[a].len() {
            let numeric = (value(&nudged(inputs, a, k, H), f)
                - value(&nudged(inputs, a, k, -H), f))
                / (2.0 * H);
            if !grad_close(analytic[k], numeric) {
                return Err(TestCaseError::fail(format!(
                    "input {a}[{k}]: analytic {} vs numeric {numeric}",
                    analytic[k]
                )));
            }
        }
    }
    Ok(())
}

fn vecs(xs: Vec<Vec<f64>>) -> Vec<Tensor> {
    xs.into_iter().map(|x| Tensor::vector(x).unwrap()).collect()
}

fn weighted(tape: &mut Tape, v: Var, weights: &[f64]) -> Var {
    let w = tape
        .leaf_vector(weights[..tape.value(v).len()].to_vec())
        .unwrap();
    tape.dot(v, w).unwrap()
}

fn vec_strategy(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn squash_gradient(x in vec_strategy(5), w in vec_strategy(5)) {
        prop_assume!(x.iter().map(|v| v * v).sum::<f64>() > 1e-4);
        check(&vecs(vec![x]), &|t, v| { let s = t.squash(v[0]).unwrap(); weighted(t, s, &w) })?;
    }

    #[test]
    fn softmax_gradient(x in vec_strategy(4), w in vec_strategy(4)) {
        check(&vecs(vec![x]), &|t, v| { let s = t.softmax(v[0]).unwrap(); weighted(t, s, &w) })?;
    }

    #[test]
    fn tanh_and_exp_gradient(x in vec_strategy(4), w in vec_strategy(4)) {
        check(&vecs(vec![x]), &|t, v| {
            let a = t.tanh(v[0]).unwrap();
            let b = t.exp(a).unwrap();
            weighted(t, b, &w)
        })?;
    }

    #[test]
    fn pcc_gradient(a in vec_strategy(6), b in vec_strategy(6)) {
        let spread = |x: &[f64]| { let m = x.iter().sum::<f64>() / 6.0; x.iter().map(|v| (v - m).powi(2)).sum::<f64>() };
        prop_assume!(spread(&a) > 1e-2 && spread(&b) > 1e-2);
        check(&vecs(vec![a, b]), &|t, v| t.pccs(v[0], v[1]).unwrap())?;
    }

    #[test]
    fn cosine_gradient(a in vec_strategy(5), b in vec_strategy(5)) {
        let norm = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        prop_assume!(norm(&a) > 1e-2 && norm(&b) > 1e-2);
        check(&vecs(vec![a, b]), &|t, v| t.cosine(v[0], v[1]).unwrap())?;
    }

    #[test]
    fn matvec_and_add_gradient(w in vec_strategy(12), x in vec_strategy(4), b in vec_strategy(3), c in vec_strategy(3)) {
        let inputs = vec![Tensor::matrix(3, 4, w).unwrap(), Tensor::vector(x).unwrap(), Tensor::vector(b).unwrap()];
        check(&inputs, &|t, v| {
            let y = t.matvec(v[0], v[1]).unwrap();
            let z = t.add(y, v[2]).unwrap();
            weighted(t, z, &c)
        })?;
    }

    #[test]
    fn row_and_sparse_matvec_gradient(w in vec_strategy(12), c in vec_strategy(4)) {
        let inputs = vec![Tensor::matrix(4, 3, w).unwrap()];
        check(&inputs, &|t, v| {
            let r = t.row(v[0], 2).unwrap();
            let y = t.sparse_matvec(v[0], vec![(0, 0.6), (2, 0.8)]).unwrap();
            let a = weighted(t, y, &c);
            let b = weighted(t, r, &c);
            let both = t.stack(&[a, b]).unwrap();
            weighted(t, both, &[1.0, -0.5])
        })?;
    }

    #[test]
    fn cross_entropy_gradient(x in vec_strategy(5), label in 0usize..5) {
        check(&vecs(vec![x]), &|t, v| t.cross_entropy(v[0], label).unwrap())?;
    }

    #[test]
    fn scalar_scaling_gradient(s in -2.0f64..2.0, x in vec_strategy(4), w in vec_strategy(4)) {
        check(&vecs(vec![vec![s], x]), &|t, v| {
            let s0 = t.index(v[0], 0).unwrap();
            let y = t.mul_scalar(s0, v[1]).unwrap();
            let z = t.scale(y, 0.5).unwrap();
            let m = t.mean(&[z, v[1]]).unwrap();
            weighted(t, m, &w)
        })?;
    }
}

#[test]
fn matrix_leaves_get_matrix_gradients() {
    let mut tape = Tape::new();
    let w = tape.leaf(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0]).unwrap());
    let x = tape.leaf_vector(vec![0.5, -1.0, 2.0]).unwrap();
    let y = tape.matvec(w, x).unwrap();
    let ones = tape.leaf_vector(vec![1.0, 1.0]).unwrap();
    let s = tape.dot(y, ones).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(w).unwrap(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
    assert_eq!(g.get(x).unwrap(), &[0.0, 2.5, 3.0]);
}

#[test]
fn analytic_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf_vector(vec![3.0]).unwrap();
    let sq = tape.dot(x, x).unwrap();
    assert_eq!(tape.backward(sq).unwrap().get(x).unwrap(), &[6.0]);

    let mut tape = Tape::new();
    let x = tape.leaf_vector(vec![0.0, 0.0]).unwrap();
    let s = tape.softmax(x).unwrap();
    let first = tape.index(s, 0).unwrap();
    let g = tape.backward(first).unwrap();
    let g = g.get(x).unwrap();
    assert!((g[0] - 0.25).abs() < 1e-15 && (g[1] + 0.25).abs() < 1e-15);
}

/// `sum_k c_k * dmr(M, q)_k` with every parameter, memory entry and the query as inputs.
#[test]
fn full_routing_graph_matches_finite_differences() {
    let mut r = rng(42);
    let cfg = RoutingConfig::for_dim(8, 2, 3).unwrap();
    let params = random_params(&mut r, &cfg, 1.0);
    let memory: Vec<Vec<f64>> = (0..3).map(|_| uniform_vec(&mut r, 8, 1.0)).collect();
    let q = uniform_vec(&mut r, 8, 1.0);
    let c = uniform_vec(&mut r, 8, 1.0);

    let mut inputs: Vec<Tensor> = params.tensors().cloned().collect();
    inputs.extend(vecs(memory));
    inputs.push(Tensor::vector(q).unwrap());
    let l = cfg.capsules;
    let graph = |t: &mut Tape, v: &[Var]| {
        let vars = RoutingVars {
            weights: v[..l].to_vec(),
            biases: v[l..2 * l].to_vec(),
        };
        let out = dmr_on(t, &vars, &cfg, &v[2 * l..2 * l + 3], v[2 * l + 3]).unwrap();
        weighted(t, out, &c)
    };
    check(&inputs, &graph).unwrap();
}

/// encode -> DMM -> QIM -> scores -> episode loss, checked against central
/// differences for every coordinate of every parameter.
#[test]
fn end_to_end_gradients_match_finite_differences() {
    let (model, ds, episode) = micro_instance();
    let (loss, grads) = model.episode_gradients(&ds, &episode).unwrap();
    assert!((loss - model.episode_loss(&ds, &episode).unwrap()).abs() < 1e-15);
    let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
    assert_eq!(
        grads.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>(),
        names
    );

    let check = end_to_end_fd(&model, &ds, &episode);
    assert!(check.failures.is_empty(), "{}", check.failures.join("\n"));
    assert!(
        check.nonzero > 100,
        "only {} non-zero gradient entries",
        check.nonzero
    );
}
