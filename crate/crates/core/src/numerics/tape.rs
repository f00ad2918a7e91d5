//! Record-and-replay reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and the ids of its
//! inputs. Ids are assigned in creation order, so inputs always precede their
//! consumers and a single reverse sweep over ids is a valid topological order.

use super::ops::{self, EPS};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatVec(Var, Var),
    /// Product of a matrix with a constant sparse vector given as (index, value) pairs.
    SparseMatVec(Var, Vec<(usize, f64)>),
    Add(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Squash(Var),
    Softmax(Var),
    Tanh(Var),
    Exp(Var),
    Dot(Var, Var),
    Pccs(Var, Var),
    Cosine(Var, Var),
    Index(Var, usize),
    Row(Var, usize),
    Stack(Vec<Var>),
    Concat(Vec<Var>),
    Sum(Vec<Var>),
    Mean(Vec<Var>),
    CrossEntropy(Var, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the root with respect to `var`; `None` when the root does not depend on it.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.adjoints.get(var.0).and_then(|a| a.as_deref())
    }

    /// Like [`Gradients::get`] but yields zeros of length `len` for unreached nodes.
    pub fn get_or_zero(&self, var: Var, len: usize) -> Vec<f64> {
        self.get(var)
            .map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// Records an input (parameter or constant).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn leaf_vector(&mut self, data: Vec<f64>) -> Result<Var> {
        Ok(self.leaf(Tensor::vector(data)?))
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::Tape(format!("node {} is not on this tape", v.0)))
        }
    }

    fn vector_len(&self, op: &'static str, v: Var) -> Result<usize> {
        self.check(v)?;
        let t = self.value(v);
        if t.rank() == 1 {
            Ok(t.len())
        } else {
            Err(Error::shape(
                op,
                format!("expected a vector, got {:?}", t.shape()),
            ))
        }
    }

    fn scalar_check(&self, op: &'static str, v: Var) -> Result<()> {
        self.check(v)?;
        if self.value(v).len() == 1 {
            Ok(())
        } else {
            Err(Error::shape(
                op,
                format!("expected a scalar, got {:?}", self.value(v).shape()),
            ))
        }
    }

    fn pair(&self, op: &'static str, a: Var, b: Var) -> Result<usize> {
        let la = self.vector_len(op, a)?;
        let lb = self.vector_len(op, b)?;
        if la != lb {
            return Err(Error::shape(op, format!("lengths {la} and {lb}")));
        }
        Ok(la)
    }

    fn push_vec(&mut self, op_name: &'static str, data: Vec<f64>, op: Op) -> Result<Var> {
        let n = data.len();
        let value = ops::finite_vec(op_name, vec![n], data)?;
        Ok(self.push(value, op))
    }

    fn push_scalar(&mut self, op_name: &'static str, x: f64, op: Op) -> Result<Var> {
        let x = ops::finite_scalar(op_name, x)?;
        Ok(self.push(Tensor::from_parts(Vec::new(), vec![x]), op))
    }

    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        self.check(w)?;
        self.check(x)?;
        ops::check_matvec(self.value(w), self.value(x))?;
        let wt = self.value(w);
        let out = ops::matvec_slice(
            wt.data(),
            wt.shape()[0],
            wt.shape()[1],
            self.value(x).data(),
        );
        self.push_vec("matvec", out, Op::MatVec(w, x))
    }

    /// `w * x` where `x` is a constant sparse vector of (column, value) pairs.
    pub fn sparse_matvec(&mut self, w: Var, x: Vec<(usize, f64)>) -> Result<Var> {
        self.check(w)?;
        let wt = self.value(w);
        if wt.rank() != 2 {
            return Err(Error::shape(
                "sparse_matvec",
                format!("matrix expected, got {:?}", wt.shape()),
            ));
        }
        let (rows, cols) = (wt.shape()[0], wt.shape()[1]);
        if let Some(&(c, _)) = x.iter().find(|(c, _)| *c >= cols) {
            return Err(Error::shape(
                "sparse_matvec",
                format!("column {c} out of range {cols}"),
            ));
        }
        let data = wt.data();
        let out: Vec<f64> = (0..rows)
            .map(|r| x.iter().map(|&(c, v)| data[r * cols + c] * v).sum())
            .collect();
        self.push_vec("sparse_matvec", out, Op::SparseMatVec(w, x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let shape = ta.shape().to_vec();
        let out: Vec<f64> = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let value = ops::finite_vec("add", shape, out)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.check(a)?;
        let t = self.value(a);
        let shape = t.shape().to_vec();
        let out = t.data().iter().map(|x| x * factor).collect();
        let value = ops::finite_vec("scale", shape, out)?;
        Ok(self.push(value, Op::Scale(a, factor)))
    }

    /// Scalar node `s` times node `v` (any shape).
    pub fn mul_scalar(&mut self, s: Var, v: Var) -> Result<Var> {
        self.scalar_check("mul_scalar", s)?;
        self.check(v)?;
        let k = self.scalar_value(s);
        let t = self.value(v);
        let shape = t.shape().to_vec();
        let out = t.data().iter().map(|x| k * x).collect();
        let value = ops::finite_vec("mul_scalar", shape, out)?;
        Ok(self.push(value, Op::MulScalar(s, v)))
    }

    pub fn squash(&mut self, x: Var) -> Result<Var> {
        self.vector_len("squash", x)?;
        let out = ops::squash_slice(self.value(x).data());
        self.push_vec("squash", out, Op::Squash(x))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        if self.vector_len("softmax", x)? == 0 {
            return Err(Error::shape("softmax", "empty input"));
        }
        let out = ops::softmax_slice(self.value(x).data());
        self.push_vec("softmax", out, Op::Softmax(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x);
        let shape = t.shape().to_vec();
        let out = t.data().iter().map(|v| v.tanh()).collect();
        let value = ops::finite_vec("tanh", shape, out)?;
        Ok(self.push(value, Op::Tanh(x)))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x);
        let shape = t.shape().to_vec();
        let out = t.data().iter().map(|v| v.exp()).collect();
        let value = ops::finite_vec("exp", shape, out)?;
        Ok(self.push(value, Op::Exp(x)))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.pair("dot", a, b)?;
        let out = ops::dot_slice(self.value(a).data(), self.value(b).data());
        self.push_scalar("dot", out, Op::Dot(a, b))
    }

    pub fn pccs(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.pair("pccs", a, b)? < 2 {
            return Err(Error::shape("pccs", "needs at least 2 coordinates"));
        }
        let out = ops::pccs_slice(self.value(a).data(), self.value(b).data());
        self.push_scalar("pccs", out, Op::Pccs(a, b))
    }

    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        self.pair("cosine", a, b)?;
        let out = ops::cosine_slice(self.value(a).data(), self.value(b).data());
        self.push_scalar("cosine", out, Op::Cosine(a, b))
    }

    /// Element `i` of a vector, as a scalar node.
    pub fn index(&mut self, v: Var, i: usize) -> Result<Var> {
        let n = self.vector_len("index", v)?;
        if i >= n {
            return Err(Error::shape("index", format!("index {i} out of range {n}")));
        }
        let x = self.value(v).data()[i];
        self.push_scalar("index", x, Op::Index(v, i))
    }

    /// Row `i` of a matrix, as a vector node.
    pub fn row(&mut self, m: Var, i: usize) -> Result<Var> {
        self.check(m)?;
        let t = self.value(m);
        if t.rank() != 2 || i >= t.shape()[0] {
            return Err(Error::shape("row", format!("row {i} of {:?}", t.shape())));
        }
        let out = t.row(i).to_vec();
        self.push_vec("row", out, Op::Row(m, i))
    }

    /// Packs scalar nodes into a vector.
    pub fn stack(&mut self, scalars: &[Var]) -> Result<Var> {
        let mut out = Vec::with_capacity(scalars.len());
        for &s in scalars {
            self.scalar_check("stack", s)?;
            out.push(self.scalar_value(s));
        }
        self.push_vec("stack", out, Op::Stack(scalars.to_vec()))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut out = Vec::new();
        for &p in parts {
            self.vector_len("concat", p)?;
            out.extend_from_slice(self.value(p).data());
        }
        self.push_vec("concat", out, Op::Concat(parts.to_vec()))
    }

    /// Elementwise sum of same-shaped nodes.
    pub fn sum(&mut self, parts: &[Var]) -> Result<Var> {
        let out = self.reduce("sum", parts, 1.0)?;
        Ok(self.push(out, Op::Sum(parts.to_vec())))
    }

    /// Elementwise mean of same-shaped nodes.
    pub fn mean(&mut self, parts: &[Var]) -> Result<Var> {
        let out = self.reduce("mean", parts, 1.0 / parts.len().max(1) as f64)?;
        Ok(self.push(out, Op::Mean(parts.to_vec())))
    }

    fn reduce(&self, op: &'static str, parts: &[Var], factor: f64) -> Result<Tensor> {
        let first = *parts.first().ok_or_else(|| Error::shape(op, "no inputs"))?;
        self.check(first)?;
        let shape = self.value(first).shape().to_vec();
        let mut acc = vec![0.0; self.value(first).len()];
        for &p in parts {
            self.check(p)?;
            let t = self.value(p);
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(op, format!("{:?} vs {:?}", t.shape(), shape)));
            }
            for (a, x) in acc.iter_mut().zip(t.data()) {
                *a += x;
            }
        }
        acc.iter_mut().for_each(|a| *a *= factor);
        ops::finite_vec(op, shape, acc)
    }

    /// `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let n = self.vector_len("cross_entropy", logits)?;
        if label >= n {
            return Err(Error::InvalidArgument(format!(
                "label {label} out of range for {n} classes"
            )));
        }
        let z = self.value(logits).data();
        let loss = ops::log_sum_exp(z) - z[label];
        self.push_scalar(
            "cross_entropy",
            loss.max(0.0),
            Op::CrossEntropy(logits, label),
        )
    }

    /// Propagates adjoints from the scalar `root` back to every node it depends on.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        self.check(root)?;
        if !self.value(root).is_scalar() {
            return Err(Error::Tape(format!(
                "backward root must be a scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(vec![1.0]);

        for id in (0..=root.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            self.propagate(node, &g, &mut adj);
            adj[id] = Some(g);
        }
        Ok(Gradients { adjoints: adj })
    }

    fn propagate(&self, node: &Node, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatVec(w, x) => {
                let wt = self.value(*w);
                let (rows, cols) = (wt.shape()[0], wt.shape()[1]);
                let xv = self.value(*x).data();
                {
                    let dw = accumulate(&mut adj[w.0], rows * cols);
                    for r in 0..rows {
                        if g[r] != 0.0 {
                            for c in 0..cols {
                                dw[r * cols + c] += g[r] * xv[c];
                            }
                        }
                    }
                }
                let dx = accumulate(&mut adj[x.0], cols);
                let wd = wt.data();
                for r in 0..rows {
                    for c in 0..cols {
                        dx[c] += wd[r * cols + c] * g[r];
                    }
                }
            }
            Op::SparseMatVec(w, x) => {
                let wt = self.value(*w);
                let (rows, cols) = (wt.shape()[0], wt.shape()[1]);
                let dw = accumulate(&mut adj[w.0], rows * cols);
                for r in 0..rows {
                    for &(c, v) in x {
                        dw[r * cols + c] += g[r] * v;
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    let d = accumulate(&mut adj[v.0], g.len());
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
            }
            Op::Scale(a, f) => {
                let d = accumulate(&mut adj[a.0], g.len());
                d.iter_mut().zip(g).for_each(|(d, g)| *d += f * g);
            }
            Op::MulScalar(s, v) => {
                let k = self.scalar_value(*s);
                let vv = self.value(*v).data();
                let ds = ops::dot_slice(g, vv);
                accumulate(&mut adj[s.0], 1)[0] += ds;
                let dv = accumulate(&mut adj[v.0], g.len());
                dv.iter_mut().zip(g).for_each(|(d, g)| *d += k * g);
            }
            Op::Squash(x) => {
                let xv = self.value(*x).data();
                let s = ops::dot_slice(xv, xv);
                let f = ops::squash_factor(s);
                let coeff = 2.0 * ops::squash_factor_deriv(s) * ops::dot_slice(xv, g);
                let dx = accumulate(&mut adj[x.0], xv.len());
                for k in 0..xv.len() {
                    dx[k] += f * g[k] + coeff * xv[k];
                }
            }
            Op::Softmax(x) => {
                let gy = ops::dot_slice(g, y);
                let dx = accumulate(&mut adj[x.0], y.len());
                for k in 0..y.len() {
                    dx[k] += y[k] * (g[k] - gy);
                }
            }
            Op::Tanh(x) => {
                let dx = accumulate(&mut adj[x.0], y.len());
                for k in 0..y.len() {
                    dx[k] += g[k] * (1.0 - y[k] * y[k]);
                }
            }
            Op::Exp(x) => {
                let dx = accumulate(&mut adj[x.0], y.len());
                for k in 0..y.len() {
                    dx[k] += g[k] * y[k];
                }
            }
            Op::Dot(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let n = av.len();
                let da = accumulate(&mut adj[a.0], n);
                for k in 0..n {
                    da[k] += g[0] * bv[k];
                }
                let db = accumulate(&mut adj[b.0], n);
                for k in 0..n {
                    db[k] += g[0] * av[k];
                }
            }
            Op::Pccs(a, b) => {
                let (ac, sa) = ops::centered(self.value(*a).data());
                let (bc, sb) = ops::centered(self.value(*b).data());
                if sa <= EPS || sb <= EPS {
                    return;
                }
                let r = y[0];
                let n = ac.len();
                let da = accumulate(&mut adj[a.0], n);
                for k in 0..n {
                    da[k] += g[0] * (bc[k] / (sa * sb) - r * ac[k] / (sa * sa));
                }
                let db = accumulate(&mut adj[b.0], n);
                for k in 0..n {
                    db[k] += g[0] * (ac[k] / (sa * sb) - r * bc[k] / (sb * sb));
                }
            }
            Op::Cosine(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let na = ops::dot_slice(av, av).sqrt();
                let nb = ops::dot_slice(bv, bv).sqrt();
                if na <= EPS || nb <= EPS {
                    return;
                }
                let c = y[0];
                let n = av.len();
                let da = accumulate(&mut adj[a.0], n);
                for k in 0..n {
                    da[k] += g[0] * (bv[k] / (na * nb) - c * av[k] / (na * na));
                }
                let db = accumulate(&mut adj[b.0], n);
                for k in 0..n {
                    db[k] += g[0] * (av[k] / (na * nb) - c * bv[k] / (nb * nb));
                }
            }
            Op::Index(v, i) => {
                let n = self.value(*v).len();
                accumulate(&mut adj[v.0], n)[*i] += g[0];
            }
            Op::Row(m, i) => {
                let t = self.value(*m);
                let cols = t.shape()[1];
                let dm = accumulate(&mut adj[m.0], t.len());
                for k in 0..cols {
                    dm[i * cols + k] += g[k];
                }
            }
            Op::Stack(parts) => {
                for (k, p) in parts.iter().enumerate() {
                    accumulate(&mut adj[p.0], 1)[0] += g[k];
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    let d = accumulate(&mut adj[p.0], n);
                    for k in 0..n {
                        d[k] += g[offset + k];
                    }
                    offset += n;
                }
            }
            Op::Sum(parts) | Op::Mean(parts) => {
                let f = match node.op {
                    Op::Mean(_) => 1.0 / parts.len() as f64,
                    _ => 1.0,
                };
                for p in parts {
                    let d = accumulate(&mut adj[p.0], g.len());
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += f * g);
                }
            }
            Op::CrossEntropy(logits, label) => {
                let z = self.value(*logits).data();
                let p = ops::softmax_slice(z);
                let d = accumulate(&mut adj[logits.0], z.len());
                for k in 0..z.len() {
                    let target = if k == *label { 1.0 } else { 0.0 };
                    d[k] += g[0] * (p[k] - target);
                }
            }
        }
    }
}
