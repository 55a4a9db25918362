//! Tape-based reverse-mode differentiation over a closed set of tensor ops.
//!
//! Every op appends a node whose parents have smaller ids, so the node list
//! is already in topological order and [`Tape::backward`] is a single reverse
//! sweep. A tape is meant for one loss evaluation; independent tapes can be
//! built concurrently on different threads.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::ops::{self, CasBasis};
use crate::tensor::Tensor;

/// Identifier of a trainable parameter; gradients are keyed by it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    Relu(Var),
    ClampMin(Var, f64),
    Sum(Var),
    Reshape(Var),
    Gather(Var, Arc<[usize]>),
    Concat(Var, Var),
    Conv1d { input: Var, kernels: Var, bias: Var },
    Hartley(Var, Arc<CasBasis>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss, keyed by parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    map: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Tensor)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Adds `other` into `self`, entry by entry.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (id, g) in &other.map {
            match self.map.get_mut(id) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    self.map.insert(*id, g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.map.values_mut() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }

    pub(crate) fn insert_or_add(&mut self, id: ParamId, data: Vec<f64>, shape: &[usize]) {
        match self.map.get_mut(&id) {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(&data) {
                    *a += b;
                }
            }
            None => {
                self.map.insert(id, Tensor::from_parts(shape.to_vec(), data));
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId, value: Tensor) -> Var {
        self.push(value, Op::Param(id), true)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        va.zip_map(vb, f).map_err(|e| match e {
            Error::Shape { dim, expected, found, .. } => Error::Shape {
                op,
                dim,
                expected,
                found,
            },
            other => other,
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.value(a).map(|x| x * factor);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, factor), rg)
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, a: Var, shift: f64) -> Var {
        let v = self.value(a).map(|x| x + shift);
        let rg = self.rg(a);
        self.push(v, Op::Offset(a), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(v, Op::Exp(a), rg)
    }

    /// Natural log; the caller keeps arguments positive.
    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        let rg = self.rg(a);
        self.push(v, Op::Log(a), rg)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::sqrt);
        let rg = self.rg(a);
        self.push(v, Op::Sqrt(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        let rg = self.rg(a);
        self.push(v, Op::Square(a), rg)
    }

    /// `max(0, v)`; the gradient at `v = 0` is taken as 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let v = ops::relu(self.value(a));
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg)
    }

    /// `max(floor, v)` with zero gradient where the floor is active.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let v = self.value(a).map(|x| x.max(floor));
        let rg = self.rg(a);
        self.push(v, Op::ClampMin(a, floor), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(v, Op::Sum(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Reshape(a), rg))
    }

    /// `out[i] = src[index[i]]` over flat storage, with output `shape`.
    pub fn gather(&mut self, src: Var, index: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != index.len() {
            return Err(Error::Shape {
                op: "gather",
                dim: "index length",
                expected: n,
                found: index.len(),
            });
        }
        let sv = self.value(src).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= sv.len()) {
            return Err(Error::invalid(
                "gather",
                format!("index {bad} out of bounds for {} elements", sv.len()),
            ));
        }
        let data: Vec<f64> = index.iter().map(|&i| sv[i]).collect();
        let rg = self.rg(src);
        Ok(self.push(
            Tensor::from_parts(shape.to_vec(), data),
            Op::Gather(src, index),
            rg,
        ))
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ndim() == 0 || va.shape()[1..] != vb.shape()[1..] || va.ndim() != vb.ndim() {
            return Err(Error::invalid(
                "concat",
                format!("incompatible shapes {:?} and {:?}", va.shape(), vb.shape()),
            ));
        }
        let mut shape = va.shape().to_vec();
        shape[0] += vb.shape()[0];
        let mut data = Vec::with_capacity(va.len() + vb.len());
        data.extend_from_slice(va.data());
        data.extend_from_slice(vb.data());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Concat(a, b), rg))
    }

    pub fn conv1d(&mut self, input: Var, kernels: Var, bias: Var) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(kernels), self.value(bias));
        ops::check_conv_shapes(x.shape(), w.shape(), b.shape())?;
        let v = ops::conv1d_raw(x, w, b);
        let rg = self.rg(input) || self.rg(kernels) || self.rg(bias);
        Ok(self.push(
            v,
            Op::Conv1d {
                input,
                kernels,
                bias,
            },
            rg,
        ))
    }

    /// Per-row orthonormal Hartley transform of a `(C, T)` node.
    pub fn hartley(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        if x.ndim() != 2 {
            return Err(Error::Shape {
                op: "hartley",
                dim: "input rank",
                expected: 2,
                found: x.ndim(),
            });
        }
        let basis = CasBasis::get(x.shape()[1]);
        let v = Tensor::from_parts(x.shape().to_vec(), basis.apply_rows(x.data()));
        let rg = self.rg(input);
        Ok(self.push(v, Op::Hartley(input, basis), rg))
    }

    /// Sum of several nodes of equal shape (left to right).
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| Error::invalid("add_all", "empty list"))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    /// Reverse sweep from a scalar `loss`; returns gradients for every
    /// parameter node reachable from it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", loss_value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Param(pid) => out.insert_or_add(*pid, g, node.value.shape()),
                Op::Add(a, b) => {
                    self.acc(&mut grads, *b, g.clone());
                    self.acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    if self.rg(*b) {
                        self.acc(&mut grads, *b, g.iter().map(|v| -v).collect());
                    }
                    self.acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    if self.rg(*a) {
                        self.acc(&mut grads, *a, g.iter().zip(vb).map(|(g, y)| g * y).collect());
                    }
                    if self.rg(*b) {
                        self.acc(&mut grads, *b, g.iter().zip(va).map(|(g, x)| g * x).collect());
                    }
                }
                Op::Scale(a, f) => self.acc(&mut grads, *a, g.iter().map(|v| v * f).collect()),
                Op::Offset(a) | Op::Reshape(a) => self.acc(&mut grads, *a, g),
                Op::Exp(a) => {
                    let y = node.value.data();
                    self.acc(&mut grads, *a, g.iter().zip(y).map(|(g, y)| g * y).collect());
                }
                Op::Log(a) => {
                    let x = self.value(*a).data();
                    self.acc(&mut grads, *a, g.iter().zip(x).map(|(g, x)| g / x).collect());
                }
                Op::Sqrt(a) => {
                    let y = node.value.data();
                    let d = g.iter().zip(y).map(|(g, y)| g * 0.5 / y).collect();
                    self.acc(&mut grads, *a, d);
                }
                Op::Square(a) => {
                    let x = self.value(*a).data();
                    let d = g.iter().zip(x).map(|(g, x)| 2.0 * g * x).collect();
                    self.acc(&mut grads, *a, d);
                }
                Op::Relu(a) => {
                    let x = self.value(*a).data();
                    let d = g
                        .iter()
                        .zip(x)
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect();
                    self.acc(&mut grads, *a, d);
                }
                Op::ClampMin(a, floor) => {
                    let x = self.value(*a).data();
                    let d = g
                        .iter()
                        .zip(x)
                        .map(|(g, &x)| if x > *floor { *g } else { 0.0 })
                        .collect();
                    self.acc(&mut grads, *a, d);
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    self.acc(&mut grads, *a, vec![g[0]; n]);
                }
                Op::Gather(src, index) => {
                    let mut d = vec![0.0; self.value(*src).len()];
                    for (&i, gv) in index.iter().zip(&g) {
                        d[i] += gv;
                    }
                    self.acc(&mut grads, *src, d);
                }
                Op::Concat(a, b) => {
                    let na = self.value(*a).len();
                    if self.rg(*b) {
                        self.acc(&mut grads, *b, g[na..].to_vec());
                    }
                    let mut g = g;
                    g.truncate(na);
                    self.acc(&mut grads, *a, g);
                }
                Op::Conv1d {
                    input,
                    kernels,
                    bias,
                } => {
                    let want_params = self.rg(*kernels) || self.rg(*bias);
                    let (gx, gw, gb) = ops::conv1d_backward(
                        self.value(*input),
                        self.value(*kernels),
                        &g,
                        self.rg(*input),
                        want_params,
                    );
                    if let Some(gx) = gx {
                        self.acc(&mut grads, *input, gx);
                    }
                    if let Some(gw) = gw {
                        self.acc(&mut grads, *kernels, gw);
                    }
                    if let Some(gb) = gb {
                        self.acc(&mut grads, *bias, gb);
                    }
                }
                Op::Hartley(a, basis) => {
                    // the basis is symmetric, so the adjoint is the transform itself
                    self.acc(&mut grads, *a, basis.apply_rows(&g));
                }
            }
        }
        Ok(out)
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], target: Var, contrib: Vec<f64>) {
        if !self.rg(target) {
            return;
        }
        match &mut grads[target.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(&contrib) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }
}
