//! Dynamic memory routing (DMR) and the two modules built on it.
//!
//! `dmr(M, q)` transforms every memory entry `m_i` and the query `q` into `l`
//! capsule spaces with shared affine maps `(W_j, b_j)`, gates memory entries
//! by `tanh` of their Pearson correlation with the transformed query, and runs
//! `r` routing iterations whose output capsules `v_j` are concatenated:
//!
//! ```text
//! m̂_ij = squash(W_j m_i + b_j)      q̂_j = squash(W_j q + b_j)
//! α_ij = 0                          p_ij = tanh(pcc(m̂_ij, q̂_j))
//! repeat r times:
//!     d_i  = softmax_j(α_i)
//!     v_j  = squash(Σ_i (d_ij + p_ij) m̂_ij)
//!     α_ij += p_ij (m̂_ij · v_j)
//!     q̂_j  = (q̂_j + v_j) / 2
//!     p_ij = tanh(pcc(m̂_ij, q̂_j))
//! output concat(v_1, ..., v_l)
//! ```
//!
//! The dynamic memory module adapts a support vector against the base-class
//! weight rows ([`dmm_adapt`]); query-guided induction routes a query against
//! one class's adapted supports ([`qim_induce`]).
//!
//! Memory entries are processed in a canonical order (lexicographic on their
//! values), so the output is bit-identical under any permutation of `M`.

use std::cmp::Ordering;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingConfig {
    pub iterations: usize,
    pub capsules: usize,
    pub capsule_dim: usize,
    pub input_dim: usize,
}

impl RoutingConfig {
    /// `capsules` capsules of size `dim / capsules`, so the output has dimension `dim`.
    pub fn for_dim(dim: usize, capsules: usize, iterations: usize) -> Result<Self> {
        if capsules == 0 || !dim.is_multiple_of(capsules) {
            return Err(Error::Config(format!(
                "capsule count {capsules} must divide the vector dimension {dim}"
            )));
        }
        let cfg = RoutingConfig {
            iterations,
            capsules,
            capsule_dim: dim / capsules,
            input_dim: dim,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn output_dim(&self) -> usize {
        self.capsules * self.capsule_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("routing needs at least one iteration".into()));
        }
        if self.capsules == 0 || self.input_dim == 0 {
            return Err(Error::Config(
                "capsule count and input dimension must be positive".into(),
            ));
        }
        if self.capsule_dim < 2 {
            return Err(Error::Config(format!(
                "capsule_dim must be at least 2 for correlation gating, got {}",
                self.capsule_dim
            )));
        }
        Ok(())
    }
}

/// How fresh routing transforms are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum RoutingInit {
    /// `W_j` copies input block `j` into capsule `j` (plus Gaussian noise); `b_j = 0`.
    IdentityBlocks { noise_std: f64 },
    /// Entries of `W_j` i.i.d. normal; `b_j = 0`.
    Normal { std: f64 },
}

impl Default for RoutingInit {
    fn default() -> Self {
        RoutingInit::IdentityBlocks { noise_std: 0.02 }
    }
}

/// Shared transforms `(W_j, b_j)`, one pair per output capsule.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingParams {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

impl RoutingParams {
    pub fn zeros(cfg: &RoutingConfig) -> Self {
        RoutingParams {
            weights: vec![Tensor::zeros(&[cfg.capsule_dim, cfg.input_dim]); cfg.capsules],
            biases: vec![Tensor::zeros(&[cfg.capsule_dim]); cfg.capsules],
        }
    }

    pub fn init(cfg: &RoutingConfig, init: RoutingInit, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let (dv, din) = (cfg.capsule_dim, cfg.input_dim);
        let (base_one, std) = match init {
            RoutingInit::IdentityBlocks { noise_std } => (true, noise_std),
            RoutingInit::Normal { std } => (false, std),
        };
        let normal = Normal::new(0.0, std.max(0.0))
            .map_err(|e| Error::Config(format!("routing init std: {e}")))?;
        let mut weights = Vec::with_capacity(cfg.capsules);
        for j in 0..cfg.capsules {
            let mut data: Vec<f64> = (0..dv * din).map(|_| normal.sample(rng)).collect();
            if base_one {
                for k in 0..dv {
                    data[k * din + (j * dv + k) % din] += 1.0;
                }
            }
            weights.push(Tensor::matrix(dv, din, data)?);
        }
        Ok(RoutingParams {
            weights,
            biases: vec![Tensor::zeros(&[dv]); cfg.capsules],
        })
    }

    /// Multiplies every `W_j` by `gain`.
    pub fn scaled(mut self, gain: f64) -> Result<Self> {
        if !(gain > 0.0 && gain.is_finite()) {
            return Err(Error::Config(format!(
                "routing gain must be positive, got {gain}"
            )));
        }
        for w in &mut self.weights {
            w.data_mut().iter_mut().for_each(|x| *x *= gain);
        }
        Ok(self)
    }

    pub fn check(&self, cfg: &RoutingConfig) -> Result<()> {
        if self.weights.len() != cfg.capsules || self.biases.len() != cfg.capsules {
            return Err(Error::shape(
                "routing_params",
                format!(
                    "{} weights / {} biases for {} capsules",
                    self.weights.len(),
                    self.biases.len(),
                    cfg.capsules
                ),
            ));
        }
        let w_shape = [cfg.capsule_dim, cfg.input_dim];
        for (w, b) in self.weights.iter().zip(&self.biases) {
            if w.shape() != w_shape || b.shape() != [cfg.capsule_dim] {
                return Err(Error::shape(
                    "routing_params",
                    format!(
                        "W {:?} / b {:?}, expected {:?} / [{}]",
                        w.shape(),
                        b.shape(),
                        w_shape,
                        cfg.capsule_dim
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> RoutingVars {
        RoutingVars {
            weights: self.weights.iter().map(|w| tape.leaf(w.clone())).collect(),
            biases: self.biases.iter().map(|b| tape.leaf(b.clone())).collect(),
        }
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.weights.iter().chain(&self.biases)
    }

    pub(crate) fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.weights.iter_mut().chain(self.biases.iter_mut())
    }
}

/// Tape handles of a bound [`RoutingParams`].
#[derive(Clone, Debug)]
pub struct RoutingVars {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
}

impl RoutingVars {
    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.weights.iter().chain(&self.biases).copied()
    }
}

/// Transformed memory `m̂_ij`, reusable across queries routed against the same memory.
#[derive(Clone, Debug)]
pub struct PreparedMemory {
    /// `hat[i][j]`, entries in canonical order.
    hat: Vec<Vec<Var>>,
}

impl PreparedMemory {
    pub fn len(&self) -> usize {
        self.hat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hat.is_empty()
    }
}

/// Per-iteration routing quantities, for inspection.
#[derive(Clone, Debug, Default)]
pub struct RoutingTrace {
    /// `couplings[t][i]` is the vector `d_i` used in iteration `t`.
    pub couplings: Vec<Vec<Var>>,
    /// `gates[t][i][j]` is `p_ij` used in iteration `t`.
    pub gates: Vec<Vec<Vec<Var>>>,
    /// `capsules[t][j]` is `v_j` produced by iteration `t`.
    pub capsules: Vec<Vec<Var>>,
}

fn lexicographic(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or_else(|| a.len().cmp(&b.len()))
}

fn transform(tape: &mut Tape, vars: &RoutingVars, j: usize, x: Var) -> Result<Var> {
    let wx = tape.matvec(vars.weights[j], x)?;
    let affine = tape.add(wx, vars.biases[j])?;
    tape.squash(affine)
}

fn check_inputs(tape: &Tape, cfg: &RoutingConfig, vectors: &[Var]) -> Result<()> {
    for &v in vectors {
        let t = tape.value(v);
        if t.rank() != 1 || t.len() != cfg.input_dim {
            return Err(Error::Dimension {
                expected: cfg.input_dim,
                found: t.len(),
            });
        }
    }
    Ok(())
}

/// Computes `m̂_ij = squash(W_j m_i + b_j)` for every memory entry.
pub fn prepare_memory(
    tape: &mut Tape,
    vars: &RoutingVars,
    cfg: &RoutingConfig,
    memory: &[Var],
) -> Result<PreparedMemory> {
    cfg.validate()?;
    if memory.is_empty() {
        return Err(Error::InvalidArgument("routing memory is empty".into()));
    }
    check_inputs(tape, cfg, memory)?;
    let mut order: Vec<Var> = memory.to_vec();
    order.sort_by(|a, b| lexicographic(tape.value(*a).data(), tape.value(*b).data()));
    let mut hat = Vec::with_capacity(order.len());
    for m in order {
        let row = (0..cfg.capsules)
            .map(|j| transform(tape, vars, j, m))
            .collect::<Result<Vec<_>>>()?;
        hat.push(row);
    }
    Ok(PreparedMemory { hat })
}

/// Routes `query` against prepared memory; returns `concat(v_1..v_l)`.
pub fn route(
    tape: &mut Tape,
    vars: &RoutingVars,
    cfg: &RoutingConfig,
    memory: &PreparedMemory,
    query: Var,
    mut trace: Option<&mut RoutingTrace>,
) -> Result<Var> {
    cfg.validate()?;
    check_inputs(tape, cfg, &[query])?;
    let (n, l) = (memory.hat.len(), cfg.capsules);
    if n == 0 {
        return Err(Error::InvalidArgument("routing memory is empty".into()));
    }
    let hat = &memory.hat;

    let mut q_hat = (0..l)
        .map(|j| transform(tape, vars, j, query))
        .collect::<Result<Vec<_>>>()?;
    let mut gates = gates_for(tape, hat, &q_hat)?;
    let zero_logits = tape.leaf(Tensor::zeros(&[l]));
    let mut logits = vec![zero_logits; n];
    let mut capsules = Vec::new();

    for t in 0..cfg.iterations {
        let couplings = logits
            .iter()
            .map(|&a| tape.softmax(a))
            .collect::<Result<Vec<_>>>()?;

        capsules = Vec::with_capacity(l);
        for j in 0..l {
            let mut terms = Vec::with_capacity(n);
            for i in 0..n {
                let d_ij = tape.index(couplings[i], j)?;
                let weight = tape.add(d_ij, gates[i][j])?;
                terms.push(tape.mul_scalar(weight, hat[i][j])?);
            }
            let v_hat = tape.sum(&terms)?;
            capsules.push(tape.squash(v_hat)?);
        }

        if let Some(tr) = trace.as_deref_mut() {
            tr.couplings.push(couplings.clone());
            tr.gates.push(gates.clone());
            tr.capsules.push(capsules.clone());
        }

        // The remaining updates only feed later iterations.
        if t + 1 == cfg.iterations {
            break;
        }
        for i in 0..n {
            let mut agreement = Vec::with_capacity(l);
            for j in 0..l {
                let a = tape.dot(hat[i][j], capsules[j])?;
                agreement.push(tape.mul_scalar(gates[i][j], a)?);
            }
            let delta = tape.stack(&agreement)?;
            logits[i] = tape.add(logits[i], delta)?;
        }
        for j in 0..l {
            let s = tape.add(q_hat[j], capsules[j])?;
            q_hat[j] = tape.scale(s, 0.5)?;
        }
        gates = gates_for(tape, hat, &q_hat)?;
    }
    tape.concat(&capsules)
}

fn gates_for(tape: &mut Tape, hat: &[Vec<Var>], q_hat: &[Var]) -> Result<Vec<Vec<Var>>> {
    hat.iter()
        .map(|row| {
            row.iter()
                .zip(q_hat)
                .map(|(&m, &q)| {
                    let r = tape.pccs(m, q)?;
                    tape.tanh(r)
                })
                .collect()
        })
        .collect()
}

/// `q' = DMR(M, q)` recorded on `tape`.
pub fn dmr_on(
    tape: &mut Tape,
    vars: &RoutingVars,
    cfg: &RoutingConfig,
    memory: &[Var],
    query: Var,
) -> Result<Var> {
    let prepared = prepare_memory(tape, vars, cfg, memory)?;
    route(tape, vars, cfg, &prepared, query, None)
}

/// `q' = DMR(M, q)`.
pub fn dmr(
    params: &RoutingParams,
    cfg: &RoutingConfig,
    memory: &[Tensor],
    query: &Tensor,
) -> Result<Tensor> {
    Ok(dmr_traced(params, cfg, memory, query)?.0)
}

/// Values of a [`RoutingTrace`] after a forward pass.
#[derive(Clone, Debug)]
pub struct TraceValues {
    pub couplings: Vec<Vec<Vec<f64>>>,
    pub gates: Vec<Vec<Vec<f64>>>,
    pub capsules: Vec<Vec<Vec<f64>>>,
}

/// [`dmr`] together with every iteration's couplings, gates and capsules.
pub fn dmr_traced(
    params: &RoutingParams,
    cfg: &RoutingConfig,
    memory: &[Tensor],
    query: &Tensor,
) -> Result<(Tensor, TraceValues)> {
    params.check(cfg)?;
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let mem: Vec<Var> = memory.iter().map(|m| tape.leaf(m.clone())).collect();
    let q = tape.leaf(query.clone());
    let prepared = prepare_memory(&mut tape, &vars, cfg, &mem)?;
    let mut trace = RoutingTrace::default();
    let out = route(&mut tape, &vars, cfg, &prepared, q, Some(&mut trace))?;
    let val = |v: &Var| tape.value(*v).data().to_vec();
    let values = TraceValues {
        couplings: trace
            .couplings
            .iter()
            .map(|it| it.iter().map(val).collect())
            .collect(),
        gates: trace
            .gates
            .iter()
            .map(|it| {
                it.iter()
                    .map(|row| row.iter().map(|g| tape.scalar_value(*g)).collect())
                    .collect()
            })
            .collect(),
        capsules: trace
            .capsules
            .iter()
            .map(|it| it.iter().map(val).collect())
            .collect(),
    };
    Ok((tape.value(out).clone(), values))
}

fn base_rows(w_base: &Tensor) -> Result<Vec<Tensor>> {
    if w_base.rank() != 2 || w_base.shape()[0] == 0 {
        return Err(Error::shape(
            "dmm_adapt",
            format!("memory matrix {:?}", w_base.shape()),
        ));
    }
    (0..w_base.shape()[0])
        .map(|i| Tensor::vector(w_base.row(i).to_vec()))
        .collect()
}

/// Adapts one support vector against the base memory: `e' = DMR(W_base, e)`.
pub fn dmm_adapt(
    params: &RoutingParams,
    cfg: &RoutingConfig,
    w_base: &Tensor,
    sample: &Tensor,
) -> Result<Tensor> {
    dmr(params, cfg, &base_rows(w_base)?, sample)
}

/// Induces the class vector for one query: `e_c = DMR({e'_{c,s}}, e_q)`.
pub fn qim_induce(
    params: &RoutingParams,
    cfg: &RoutingConfig,
    adapted_supports: &[Tensor],
    query: &Tensor,
) -> Result<Tensor> {
    dmr(params, cfg, adapted_supports, query)
}
