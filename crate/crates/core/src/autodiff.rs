//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so the node vector is already a topological order and
//! backward is a single reverse sweep.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::par;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{self, dims2, same_shape, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Log(Var),
    Exp(Var),
    Sum(Var),
    Mean(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    Pick {
        x: Var,
        idx: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Norm(Var),
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Transpose(Var),
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Recording context for one forward/backward pass.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    record: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
    params: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> &BTreeMap<ParamId, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Tensor> {
        self.params
    }
}

impl Graph {
    /// A graph that records history for backward.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            record: true,
        }
    }

    /// Evaluation-only graph: values are computed but nothing is recorded.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            record: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = self.record && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: self.record && requires_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false, None)
    }

    /// A free differentiable leaf, not tied to any parameter store.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true, None)
    }

    /// Leaf holding a copy of a stored parameter; trainability follows the
    /// store's `requires_grad` flag.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.leaf(p.value.clone(), p.requires_grad, Some(id))
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2("matmul", self.value(a))?;
        let (k2, n) = dims2("matmul", self.value(b))?;
        if k != k2 {
            return Err(shape_err("matmul", self.value(a), self.value(b)));
        }
        let data = tensor::matmul_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::new(&[m, n], data)?, Op::MatMul(a, b), &[a, b]))
    }

    /// Batched matmul over the leading axis: `[N,p,q]·[N,q,r]`, or with
    /// `trans_b`, `[N,p,q]·[N,r,q]ᵀ`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        let bad = || Error::Shape {
            op: "bmm",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (nb, p, q) = (sa[0], sa[1], sa[2]);
        let r = if trans_b {
            if sb[2] != q {
                return Err(bad());
            }
            sb[1]
        } else {
            if sb[1] != q {
                return Err(bad());
            }
            sb[2]
        };
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let blocks = par::map_range(nb, |i| {
            let ai = &ad[i * p * q..(i + 1) * p * q];
            let bi = &bd[i * q * r..(i + 1) * q * r];
            if trans_b {
                tensor::matmul_nt(ai, bi, p, q, r)
            } else {
                tensor::matmul_nn(ai, bi, p, q, r)
            }
        });
        let out = Tensor::new(&[nb, p, r], blocks.concat())?;
        Ok(self.push(out, Op::Bmm { a, b, trans_b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a vector along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let d = xv.last_dim();
        if bv.shape() != [d] {
            return Err(shape_err("add_bias", xv, bv));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(d) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::AddScalar(x), &[x])
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(out, Op::Relu(x), &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let out = softmax_rows(self.value(x));
        self.push(out, Op::Softmax(x), &[x])
    }

    /// Log-softmax over the last axis (numerically stable).
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let out = log_softmax_rows(self.value(x));
        self.push(out, Op::LogSoftmax(x), &[x])
    }

    /// Natural log; every input entry must be strictly positive.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::invalid(format!("log of non-positive value {bad}")));
        }
        let out = self.value(x).map(f64::ln);
        Ok(self.push(out, Op::Log(x), &[x]))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::exp);
        self.push(out, Op::Exp(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: f64 = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Sums out `axis`, removing it from the shape. A rank-1 input reduces to
    /// a one-element tensor.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape();
        if axis >= shape.len() {
            return Err(Error::invalid(format!(
                "sum_axis: axis {axis} out of range for {shape:?}"
            )));
        }
        let (outer, len, inner) = split_axis(shape, axis);
        let mut out = vec![0.0; outer * inner];
        let d = t.data();
        for o in 0..outer {
            for l in 0..len {
                let src = &d[(o * len + l) * inner..(o * len + l + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (a, b) in dst.iter_mut().zip(src) {
                    *a += b;
                }
            }
        }
        let mut new_shape: Vec<usize> = shape.to_vec();
        new_shape.remove(axis);
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let out = Tensor::new(&new_shape, out)?;
        Ok(self.push(out, Op::SumAxis { x, axis }, &[x]))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = *self
            .value(x)
            .shape()
            .get(axis)
            .ok_or_else(|| Error::invalid("mean_axis: axis out of range"))?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / len as f64))
    }

    /// Selects rows of a rank-2 tensor; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, d) = dims2("gather_rows", self.value(x))?;
        if idx.is_empty() {
            return Err(Error::invalid("gather_rows: empty index list"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::invalid(format!("gather_rows: row {bad} out of range {n}")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(&[idx.len(), d], out)?;
        Ok(self.push(out, Op::GatherRows { x, idx: idx.to_vec() }, &[x]))
    }

    /// `out[r] = x[r, idx[r]]` for a rank-2 `x`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, c) = dims2("pick", self.value(x))?;
        if idx.len() != n {
            return Err(Error::Shape {
                op: "pick",
                lhs: vec![n, c],
                rhs: vec![idx.len()],
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= c) {
            return Err(Error::invalid(format!("pick: column {bad} out of range {c}")));
        }
        let src = self.value(x).data();
        let out: Vec<f64> = idx.iter().enumerate().map(|(r, &j)| src[r * c + j]).collect();
        let out = Tensor::new(&[n], out)?;
        Ok(self.push(out, Op::Pick { x, idx: idx.to_vec() }, &[x]))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        for p in [gamma, beta] {
            if self.value(p).shape() != [d] {
                return Err(shape_err("layer_norm", xv, self.value(p)));
            }
        }
        let rows = xv.rows();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = xv.row(r);
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mu) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(xv.shape(), out)?;
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        };
        Ok(self.push(out, op, &[x, gamma, beta]))
    }

    /// Frobenius norm `sqrt(Σx²)`. The subgradient at zero is taken as zero.
    pub fn frobenius_norm(&mut self, x: Var) -> Var {
        let n = self.value(x).frobenius();
        self.push(Tensor::scalar(n), Op::Norm(x), &[x])
    }

    /// `sqrt(Σx² + eps)`, differentiable everywhere for `eps > 0`.
    pub fn smoothed_l2_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::invalid(format!("smoothed_l2_norm: eps must be > 0, got {eps}")));
        }
        let n = (self.value(x).sum_sq() + eps).sqrt();
        Ok(self.push(Tensor::scalar(n), Op::Norm(x), &[x]))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::invalid("concat: no inputs"))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::invalid(format!("concat: axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for v in xs {
            let s = self.value(*v).shape();
            let ok = s.len() == base.len() && s.iter().enumerate().all(|(i, &e)| i == axis || e == base[i]);
            if !ok {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in xs {
                let t = self.value(*v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(out, Op::Concat { xs: xs.to_vec(), axis }, xs))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        Ok(self.push(out, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Axis permutation: `out.shape[i] = x.shape[perm[i]]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let mut seen = perm.to_vec();
        seen.sort_unstable();
        if perm.len() != t.rank() || seen.iter().enumerate().any(|(i, &p)| i != p) {
            return Err(Error::invalid(format!(
                "permute: {perm:?} is not a permutation of rank {}",
                t.rank()
            )));
        }
        let out = permute_tensor(t, perm);
        Ok(self.push(out, Op::Permute { x, perm: perm.to_vec() }, &[x]))
    }

    // ----------------------------------------------------------- backward

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::invalid(format!(
                "backward: loss must be scalar, got shape {:?}",
                lt.shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::NoGraph("loss does not depend on any trainable tensor".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut params: BTreeMap<ParamId, Tensor> = BTreeMap::new();
        let mut by_node = Vec::with_capacity(grads.len());
        for (i, g) in grads.into_iter().enumerate() {
            let node = &self.nodes[i];
            let g = g
                .filter(|_| node.requires_grad)
                .map(|g| Tensor::new(node.value.shape(), g).expect("gradient shape"));
            if let (Some(id), Some(g)) = (node.param, g.as_ref()) {
                match params.get_mut(&id) {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    None => {
                        params.insert(id, g.clone());
                    }
                }
            }
            by_node.push(g);
        }
        Ok(Gradients { by_node, params })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]);
        f(slot);
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.requires_grad(*a) {
                    let da = tensor::matmul_nt(g, bv.data(), m, n, k);
                    self.accumulate(grads, *a, |s| add_into(s, &da));
                }
                if self.requires_grad(*b) {
                    let db = tensor::matmul_tn(av.data(), g, m, k, n);
                    self.accumulate(grads, *b, |s| add_into(s, &db));
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (nb, p, q) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let r = out.shape()[2];
                let (ad, bd) = (av.data(), bv.data());
                if self.requires_grad(*a) {
                    let blocks = par::map_range(nb, |i| {
                        let gi = &g[i * p * r..(i + 1) * p * r];
                        let bi = &bd[i * q * r..(i + 1) * q * r];
                        if *trans_b {
                            tensor::matmul_nn(gi, bi, p, r, q)
                        } else {
                            tensor::matmul_nt(gi, bi, p, r, q)
                        }
                    });
                    self.accumulate(grads, *a, |s| add_into(s, &blocks.concat()));
                }
                if self.requires_grad(*b) {
                    let blocks = par::map_range(nb, |i| {
                        let gi = &g[i * p * r..(i + 1) * p * r];
                        let ai = &ad[i * p * q..(i + 1) * p * q];
                        if *trans_b {
                            tensor::matmul_tn(gi, ai, p, r, q)
                        } else {
                            tensor::matmul_tn(ai, gi, p, q, r)
                        }
                    });
                    self.accumulate(grads, *b, |s| add_into(s, &blocks.concat()));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |s| add_into(s, g));
                self.accumulate(grads, *b, |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |s| add_into(s, g));
                self.accumulate(grads, *b, |s| {
                    for (x, y) in s.iter_mut().zip(g) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |s| {
                    for ((x, gi), bi) in s.iter_mut().zip(g).zip(bd) {
                        *x += gi * bi;
                    }
                });
                self.accumulate(grads, *b, |s| {
                    for ((x, gi), ai) in s.iter_mut().zip(g).zip(ad) {
                        *x += gi * ai;
                    }
                });
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, |s| add_into(s, g));
                let d = self.value(*b).len();
                self.accumulate(grads, *b, |s| {
                    for row in g.chunks(d) {
                        add_into(s, row);
                    }
                });
            }
            Op::Scale(x, c) => {
                self.accumulate(grads, *x, |s| {
                    for (a, gi) in s.iter_mut().zip(g) {
                        *a += c * gi;
                    }
                });
            }
            Op::AddScalar(x) => self.accumulate(grads, *x, |s| add_into(s, g)),
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                self.accumulate(grads, *x, |s| {
                    for ((a, gi), xi) in s.iter_mut().zip(g).zip(xd) {
                        if *xi > 0.0 {
                            *a += gi;
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let d = out.last_dim();
                self.accumulate(grads, *x, |s| {
                    for ((srow, grow), yrow) in s.chunks_mut(d).zip(g.chunks(d)).zip(out.data().chunks(d)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((a, gi), yi) in srow.iter_mut().zip(grow).zip(yrow) {
                            *a += yi * (gi - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let d = out.last_dim();
                self.accumulate(grads, *x, |s| {
                    for ((srow, grow), yrow) in s.chunks_mut(d).zip(g.chunks(d)).zip(out.data().chunks(d)) {
                        let gsum: f64 = grow.iter().sum();
                        for ((a, gi), yi) in srow.iter_mut().zip(grow).zip(yrow) {
                            *a += gi - yi.exp() * gsum;
                        }
                    }
                });
            }
            Op::Log(x) => {
                let xd = self.value(*x).data();
                self.accumulate(grads, *x, |s| {
                    for ((a, gi), xi) in s.iter_mut().zip(g).zip(xd) {
                        *a += gi / xi;
                    }
                });
            }
            Op::Exp(x) => {
                self.accumulate(grads, *x, |s| {
                    for ((a, gi), yi) in s.iter_mut().zip(g).zip(out.data()) {
                        *a += gi * yi;
                    }
                });
            }
            Op::Sum(x) => self.accumulate(grads, *x, |s| s.iter_mut().for_each(|a| *a += g[0])),
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                self.accumulate(grads, *x, |s| s.iter_mut().for_each(|a| *a += g[0] / n));
            }
            Op::SumAxis { x, axis } => {
                let (outer, len, inner) = split_axis(self.value(*x).shape(), *axis);
                self.accumulate(grads, *x, |s| {
                    for o in 0..outer {
                        let gsrc = &g[o * inner..(o + 1) * inner];
                        for l in 0..len {
                            let dst = &mut s[(o * len + l) * inner..(o * len + l + 1) * inner];
                            add_into(dst, gsrc);
                        }
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let d = out.last_dim();
                self.accumulate(grads, *x, |s| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut s[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::Pick { x, idx } => {
                let c = self.value(*x).last_dim();
                self.accumulate(grads, *x, |s| {
                    for (r, &j) in idx.iter().enumerate() {
                        s[r * c + j] += g[r];
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = out.last_dim();
                let gam = self.value(*gamma).data();
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for (r, is) in inv_std.iter().enumerate() {
                        let grow = &g[r * d..(r + 1) * d];
                        let hrow = &xhat[r * d..(r + 1) * d];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let dh = grow[j] * gam[j];
                            m1 += dh;
                            m2 += dh * hrow[j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            let dh = grow[j] * gam[j];
                            dx[r * d + j] = is * (dh - m1 - hrow[j] * m2);
                        }
                    }
                    self.accumulate(grads, *x, |s| add_into(s, &dx));
                }
                self.accumulate(grads, *gamma, |s| {
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            s[j] += grow[j] * hrow[j];
                        }
                    }
                });
                self.accumulate(grads, *beta, |s| {
                    for grow in g.chunks(d) {
                        add_into(s, grow);
                    }
                });
            }
            Op::Norm(x) => {
                let y = out.item();
                let xd = self.value(*x).data();
                self.accumulate(grads, *x, |s| {
                    if y > 0.0 {
                        for (a, xi) in s.iter_mut().zip(xd) {
                            *a += g[0] * xi / y;
                        }
                    }
                });
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                for v in xs {
                    let len = self.value(*v).shape()[*axis];
                    self.accumulate(grads, *v, |s| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            add_into(&mut s[o * len * inner..(o + 1) * len * inner], src);
                        }
                    });
                    offset += len;
                }
            }
            Op::Transpose(x) => {
                let (m, n) = (out.shape()[0], out.shape()[1]);
                self.accumulate(grads, *x, |s| {
                    for i in 0..m {
                        for j in 0..n {
                            s[j * m + i] += g[i * n + j];
                        }
                    }
                });
            }
            Op::Reshape(x) => self.accumulate(grads, *x, |s| add_into(s, g)),
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let gt = Tensor::new(out.shape(), g.to_vec()).expect("gradient shape");
                let back = permute_tensor(&gt, &inv);
                self.accumulate(grads, *x, |s| add_into(s, back.data()));
            }
        }
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_rows(t: &Tensor) -> Tensor {
    let d = t.last_dim();
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(d) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    out
}

pub(crate) fn log_softmax_rows(t: &Tensor) -> Tensor {
    let d = t.last_dim();
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(d) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

fn permute_tensor(t: &Tensor, perm: &[usize]) -> Tensor {
    let shape = t.shape();
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let src = t.data();
    let mut out = Vec::with_capacity(t.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..t.len() {
        out.push(src[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(&out_shape, out).expect("permuted shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_definition() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![0.0; 3]));
        let y = g.softmax(x);
        for v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn quadratic_gradient() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::from_vec(vec![1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn relu_dead_region_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::from_vec(vec![-1.0]));
        let y = g.relu(x);
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn constants_never_receive_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::from_vec(vec![3.0]));
        let x = g.variable(Tensor::from_vec(vec![2.0]));
        let y = g.mul(c, x).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert!(grads.wrt(c).is_none());
        assert_eq!(grads.wrt(x).unwrap().data(), &[3.0]);
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::InvalidArgument(_))));
        let c = g.constant(Tensor::scalar(1.0));
        assert!(matches!(g.backward(c), Err(Error::NoGraph(_))));

        let mut inf = Graph::inference();
        let v = inf.variable(Tensor::scalar(1.0));
        let s = inf.sum(v);
        assert!(matches!(inf.backward(s), Err(Error::NoGraph(_))));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        match g.matmul(a, b) {
            Err(Error::Shape { op, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(g.smoothed_l2_norm(a, 0.0), Err(Error::InvalidArgument(_))));
        assert!(matches!(g.smoothed_l2_norm(a, -1.0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn permute_roundtrip() {
        let t = Tensor::new(&[2, 3, 4], (0..24).map(|i| i as f64).collect()).unwrap();
        let p = permute_tensor(&t, &[2, 0, 1]);
        assert_eq!(p.shape(), &[4, 2, 3]);
        // out[k][i][j] = t[i][j][k]
        assert_eq!(p.data()[6 + 3 + 2], t.data()[12 + 2 * 4 + 1]);
        let back = permute_tensor(&p, &[1, 2, 0]);
        assert_eq!(back, t);
    }
}
