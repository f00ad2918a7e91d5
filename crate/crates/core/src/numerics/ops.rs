//! Forward kernels shared by the tape and by tape-free callers.
//!
//! The slice-level functions assume the caller has checked shapes; the
//! `Tensor`-level wrappers validate and reject non-finite results.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Guard for every norm and variance denominator.
pub const EPS: f64 = 1e-12;

pub(crate) fn dot_slice(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn matvec_slice(w: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|r| dot_slice(&w[r * cols..(r + 1) * cols], x))
        .collect()
}

/// Scale factor `g(s) = s / ((1 + s) * sqrt(s + EPS))` with `s = |x|^2`,
/// so that `squash(x) = g(s) x`.
pub(crate) fn squash_factor(s: f64) -> f64 {
    s / ((1.0 + s) * (s + EPS).sqrt())
}

/// Derivative of [`squash_factor`] with respect to `s`.
pub(crate) fn squash_factor_deriv(s: f64) -> f64 {
    let root = (s + EPS).sqrt();
    let denom = (1.0 + s) * root;
    let denom_deriv = root + (1.0 + s) / (2.0 * root);
    (denom - s * denom_deriv) / (denom * denom)
}

pub(crate) fn squash_slice(x: &[f64]) -> Vec<f64> {
    let g = squash_factor(dot_slice(x, x));
    x.iter().map(|v| g * v).collect()
}

pub(crate) fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub(crate) fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Mean-centred copy and its Euclidean norm.
pub(crate) fn centered(x: &[f64]) -> (Vec<f64>, f64) {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    let c: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let norm = dot_slice(&c, &c).sqrt();
    (c, norm)
}

/// Pearson correlation of two equal-length samples; 0 when either has zero variance.
pub(crate) fn pccs_slice(a: &[f64], b: &[f64]) -> f64 {
    let (ac, sa) = centered(a);
    let (bc, sb) = centered(b);
    if sa <= EPS || sb <= EPS {
        return 0.0;
    }
    (dot_slice(&ac, &bc) / (sa * sb)).clamp(-1.0, 1.0)
}

pub(crate) fn cosine_slice(a: &[f64], b: &[f64]) -> f64 {
    let na = dot_slice(a, a).sqrt();
    let nb = dot_slice(b, b).sqrt();
    if na <= EPS || nb <= EPS {
        return 0.0;
    }
    (dot_slice(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

fn expect_vector(op: &'static str, t: &Tensor) -> Result<()> {
    if t.rank() == 1 {
        Ok(())
    } else {
        Err(Error::shape(
            op,
            format!("expected a vector, got shape {:?}", t.shape()),
        ))
    }
}

fn same_len(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    expect_vector(op, a)?;
    expect_vector(op, b)?;
    if a.len() == b.len() {
        Ok(())
    } else {
        Err(Error::shape(
            op,
            format!("lengths {} and {}", a.len(), b.len()),
        ))
    }
}

pub(crate) fn finite_vec(op: &'static str, shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(Tensor::from_parts(shape, data))
    } else {
        Err(Error::NonFinite { op })
    }
}

pub(crate) fn finite_scalar(op: &'static str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { op })
    }
}

pub fn matvec(w: &Tensor, x: &Tensor) -> Result<Tensor> {
    check_matvec(w, x)?;
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    finite_vec(
        "matvec",
        vec![rows],
        matvec_slice(w.data(), rows, cols, x.data()),
    )
}

pub(crate) fn check_matvec(w: &Tensor, x: &Tensor) -> Result<()> {
    expect_vector("matvec", x)?;
    if w.rank() != 2 || w.shape()[1] != x.len() {
        return Err(Error::shape(
            "matvec",
            format!("matrix {:?} times vector of length {}", w.shape(), x.len()),
        ));
    }
    Ok(())
}

/// `(|x|^2 / (1 + |x|^2)) * x / |x|`, with `squash(0) = 0`.
pub fn squash(x: &Tensor) -> Result<Tensor> {
    expect_vector("squash", x)?;
    finite_vec("squash", vec![x.len()], squash_slice(x.data()))
}

pub fn softmax(x: &Tensor) -> Result<Tensor> {
    expect_vector("softmax", x)?;
    if x.is_empty() {
        return Err(Error::shape("softmax", "empty input"));
    }
    finite_vec("softmax", vec![x.len()], softmax_slice(x.data()))
}

/// Pearson correlation treating coordinates as paired samples.
pub fn pccs(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_len("pccs", a, b)?;
    if a.len() < 2 {
        return Err(Error::shape("pccs", "needs at least 2 coordinates"));
    }
    finite_scalar("pccs", pccs_slice(a.data(), b.data()))
}

pub fn cosine(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_len("cosine", a, b)?;
    finite_scalar("cosine", cosine_slice(a.data(), b.data()))
}

pub fn dot(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_len("dot", a, b)?;
    finite_scalar("dot", dot_slice(a.data(), b.data()))
}

pub fn norm(x: &Tensor) -> f64 {
    dot_slice(x.data(), x.data()).sqrt()
}
