//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only computation record. Every operation pushes
//! one node holding its output value and the inputs it was computed from, so
//! node order is always a topological order. [`Graph::backward`] walks the
//! record once in reverse and returns the gradients of all leaves that were
//! created with `requires_grad = true`.
//!
//! ```
//! use tadistill_core::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::scalar(3.0));
//! let y = g.mul(x, x).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().item(), 6.0);
//! ```

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::kernels::{self, ConvDims};
use crate::tensor::{broadcast_offsets, broadcast_shape, Tensor};

/// Arguments of `log` and divisors are clamped to at least this magnitude.
pub const CLAMP_EPS: f64 = 1e-12;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: u32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Div,
    Relu,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Scale(f64),
    AddScalar(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    Max,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Conv2d { input: Var, kernel: Var, bias: Var },
    MaxPool2d { input: Var, argmax: Vec<u32> },
    Sum { input: Var, axis: Option<usize> },
    Mean { input: Var, axis: Option<usize> },
    Max { input: Var, argmax: Vec<usize> },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Narrow { input: Var, axis: usize, start: usize },
    Concat { inputs: Vec<Var>, axis: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The computation record.
#[derive(Debug)]
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Leaf gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    graph: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf created with `requires_grad = true`.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        if var.graph != self.graph {
            return None;
        }
        self.grads.get(var.index as usize).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        if var.graph != self.graph {
            return None;
        }
        self.grads.get_mut(var.index as usize).and_then(Option::take)
    }
}

/// Split `shape` around `axis` into (outer, axis length, inner) extents.
fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn clamp_magnitude(x: f64) -> f64 {
    if x.abs() >= CLAMP_EPS {
        x
    } else if x < 0.0 {
        -CLAMP_EPS
    } else {
        CLAMP_EPS
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = shape.len();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..data.len() {
        out.push(data[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

/// Sum `grad` (shaped like a broadcast result) down to `shape`.
fn reduce_to_shape(grad: Tensor, shape: &[usize]) -> Tensor {
    if grad.shape() == shape {
        return grad;
    }
    let offsets = broadcast_offsets(grad.shape(), shape);
    let mut out = Tensor::zeros(shape);
    let dst = out.data_mut();
    for (g, &o) in grad.data().iter().zip(&offsets) {
        dst[o] += g;
    }
    out
}

fn add_into(acc: &mut Tensor, delta: &Tensor) {
    debug_assert_eq!(acc.shape(), delta.shape());
    for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
        *a += d;
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> &Node {
        assert_eq!(v.graph, self.id, "variable belongs to a different computation record");
        &self.nodes[v.index as usize]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        assert!(!self.consumed, "cannot extend a computation record after backward");
        let index = u32::try_from(self.nodes.len()).expect("computation record too large");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { graph: self.id, index }
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `v` cut off from the gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.node(v).requires_grad)
    }

    // ----- elementwise -------------------------------------------------

    pub fn elementwise(&mut self, kind: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        let binary = |b: Option<Var>| b.ok_or_else(|| Error::contract(format!("{kind:?} needs a second operand")));
        Ok(match kind {
            Elementwise::Add => self.add(a, binary(b)?)?,
            Elementwise::Sub => self.sub(a, binary(b)?)?,
            Elementwise::Mul => self.mul(a, binary(b)?)?,
            Elementwise::Div => self.div(a, binary(b)?)?,
            Elementwise::Relu => self.relu(a),
            Elementwise::Exp => self.exp(a),
            Elementwise::Log => self.log(a),
            Elementwise::Tanh => self.tanh(a),
            Elementwise::Sigmoid => self.sigmoid(a),
            Elementwise::Scale(c) => self.scale(a, c),
            Elementwise::AddScalar(c) => self.add_scalar(a, c),
        })
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: fn(Var, Var) -> Op,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let value = if va.shape() == vb.shape() {
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(va.shape().to_vec(), data)?
        } else {
            let shape = broadcast_shape(va.shape(), vb.shape()).ok_or_else(|| Error::ShapeMismatch {
                op: name,
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            })?;
            let oa = broadcast_offsets(&shape, va.shape());
            let ob = broadcast_offsets(&shape, vb.shape());
            let (da, db) = (va.data(), vb.data());
            let data = oa.iter().zip(&ob).map(|(&i, &j)| f(da[i], db[j])).collect();
            Tensor::new(shape, data)?
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, op(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// `a / b` with `|b|` clamped to at least [`CLAMP_EPS`].
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / clamp_magnitude(y), Op::Div)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        let rg = self.node(a).requires_grad;
        self.push(value, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// Natural log of `max(a, CLAMP_EPS)`.
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(CLAMP_EPS).ln(), Op::Log(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    // ----- linear algebra ----------------------------------------------

    fn matrix_dims(&self, v: Var, op: &'static str, other: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            _ => Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(v).to_vec(),
                rhs: self.shape(other).to_vec(),
            }),
        }
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul", b)?;
        let (k2, n) = self.matrix_dims(b, "matmul", a)?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            0.0,
            &mut out,
        );
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `[m, k] x [n, k]^T -> [m, n]`, the layout of a linear layer weight.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul_t", b)?;
        let (n, k2) = self.matrix_dims(b, "matmul_t", a)?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul_t",
                lhs: vec![m, k],
                rhs: vec![n, k2],
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            true,
            0.0,
            &mut out,
        );
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulT(a, b), rg))
    }

    /// 3x3 cross-correlation, stride 1, zero padding 1, plus per-filter bias.
    /// `[N, C, H, W] * [F, C, 3, 3] + [F] -> [N, F, H, W]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let mismatch = |g: &Self, a: Var, b: Var| Error::ShapeMismatch {
            op: "conv2d",
            lhs: g.shape(a).to_vec(),
            rhs: g.shape(b).to_vec(),
        };
        let [n, c, h, w] = *self.shape(input) else {
            return Err(mismatch(self, input, kernel));
        };
        let [f, kc, 3, 3] = *self.shape(kernel) else {
            return Err(mismatch(self, input, kernel));
        };
        if kc != c {
            return Err(Error::contract(format!(
                "conv2d channel mismatch: input has {c} channels, kernel expects {kc}"
            )));
        }
        if self.shape(bias) != [f] {
            return Err(mismatch(self, kernel, bias));
        }
        let dims = ConvDims { n, c, h, w, f };
        let out = kernels::conv2d_forward(
            &dims,
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
        );
        let rg = self.any_grad(&[input, kernel, bias]);
        Ok(self.push(
            Tensor::new(vec![n, f, h, w], out)?,
            Op::Conv2d { input, kernel, bias },
            rg,
        ))
    }

    /// 2x2 max pooling with stride 2 over `[N, C, H, W]`.
    pub fn maxpool2d(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = *self.shape(input) else {
            return Err(Error::contract(format!(
                "maxpool2d expects a rank-4 input, got {:?}",
                self.shape(input)
            )));
        };
        if h % 2 != 0 {
            return Err(Error::contract(format!("maxpool2d: height {h} is odd")));
        }
        if w % 2 != 0 {
            return Err(Error::contract(format!("maxpool2d: width {w} is odd")));
        }
        let (out, argmax) = kernels::maxpool2x2_forward(self.value(input).data(), n * c, h, w);
        let rg = self.any_grad(&[input]);
        Ok(self.push(
            Tensor::new(vec![n, c, h / 2, w / 2], out)?,
            Op::MaxPool2d { input, argmax },
            rg,
        ))
    }

    // ----- reductions --------------------------------------------------

    fn check_axis(&self, a: Var, axis: Option<usize>) -> Result<()> {
        match axis {
            Some(ax) if ax >= self.shape(a).len() => Err(Error::contract(format!(
                "axis {ax} out of range for shape {:?}",
                self.shape(a)
            ))),
            _ => Ok(()),
        }
    }

    fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
        let mut s = shape.to_vec();
        s.remove(axis);
        s
    }

    pub fn reduce(&mut self, kind: Reduce, a: Var, axis: Option<usize>) -> Result<Var> {
        match kind {
            Reduce::Sum => self.sum(a, axis),
            Reduce::Mean => self.mean(a, axis),
            Reduce::Max => self.max(a, axis),
        }
    }

    fn sum_values(&self, a: Var, axis: Option<usize>) -> Tensor {
        let v = self.value(a);
        match axis {
            None => Tensor::scalar(v.data().iter().sum()),
            Some(ax) => {
                let (outer, len, inner) = axis_extents(v.shape(), ax);
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for l in 0..len {
                        let src = &v.data()[(o * len + l) * inner..][..inner];
                        for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                Tensor::new(Self::reduced_shape(v.shape(), ax), out).expect("reduced shape")
            }
        }
    }

    /// Sum over all elements, or over `axis` (which is removed).
    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.check_axis(a, axis)?;
        let value = self.sum_values(a, axis);
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Sum { input: a, axis }, rg))
    }

    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.check_axis(a, axis)?;
        let count = match axis {
            None => self.value(a).numel(),
            Some(ax) => self.shape(a)[ax],
        };
        let value = self.sum_values(a, axis).map(|x| x / count as f64);
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Mean { input: a, axis }, rg))
    }

    /// Maximum over all elements or along `axis`; the gradient goes to the
    /// first maximal element.
    pub fn max(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.check_axis(a, axis)?;
        let v = self.value(a);
        let (value, argmax) = match axis {
            None => {
                let mut best = 0;
                for (i, &x) in v.data().iter().enumerate() {
                    if x > v.data()[best] {
                        best = i;
                    }
                }
                (Tensor::scalar(v.data()[best]), vec![best])
            }
            Some(ax) => {
                let (outer, len, inner) = axis_extents(v.shape(), ax);
                let mut vals = Vec::with_capacity(outer * inner);
                let mut arg = Vec::with_capacity(outer * inner);
                for o in 0..outer {
                    for i in 0..inner {
                        let mut best = o * len * inner + i;
                        for l in 1..len {
                            let idx = (o * len + l) * inner + i;
                            if v.data()[idx] > v.data()[best] {
                                best = idx;
                            }
                        }
                        vals.push(v.data()[best]);
                        arg.push(best);
                    }
                }
                (Tensor::new(Self::reduced_shape(v.shape(), ax), vals)?, arg)
            }
        };
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Max { input: a, argmax }, rg))
    }

    // ----- shape manipulation -----------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Reorder axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let rank = self.shape(a).len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::contract(format!("invalid permutation {perm:?} for rank {rank}")));
        }
        let v = self.value(a);
        let (shape, data) = permute_data(v.data(), v.shape(), perm);
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Permute(a, perm.to_vec()), rg))
    }

    /// 2-d transpose.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).len() != 2 {
            return Err(Error::contract("transpose expects a matrix"));
        }
        self.permute(a, &[1, 0])
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis(a, Some(axis))?;
        let v = self.value(a);
        let (outer, full, inner) = axis_extents(v.shape(), axis);
        if len == 0 || start + len > full {
            return Err(Error::contract(format!(
                "narrow {start}..{} out of range for axis {axis} of length {full}",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&v.data()[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Narrow { input: a, axis, start }, rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| Error::contract("concat of nothing"))?;
        self.check_axis(first, Some(axis))?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_extents(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                data.extend_from_slice(&self.value(v).data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.any_grad(inputs);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    // ----- backward ----------------------------------------------------

    /// Propagate gradients from a scalar `root`. A record supports exactly
    /// one backward pass.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        if root.graph != self.id {
            return Err(Error::StaleRecord("root belongs to a different computation record"));
        }
        if self.consumed {
            return Err(Error::StaleRecord("backward already ran on this record"));
        }
        let root_value = &self.nodes[root.index as usize].value;
        if root_value.numel() != 1 {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        if self.nodes[root.index as usize].requires_grad {
            grads[root.index as usize] = Some(Tensor::full(root_value.shape(), 1.0));
        }
        for i in (0..=root.index as usize).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, g, &mut grads);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { graph: self.id, grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], target: Var, delta: Tensor) {
        let idx = target.index as usize;
        if !self.nodes[idx].requires_grad {
            return;
        }
        match &mut grads[idx] {
            Some(acc) => add_into(acc, &delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.index as usize].requires_grad
    }

    fn propagate(&self, i: usize, g: Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.index as usize].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.wants(*b) {
                    self.accumulate(grads, *b, reduce_to_shape(g.clone(), val(*b).shape()));
                }
                self.accumulate(grads, *a, reduce_to_shape(g, val(*a).shape()));
            }
            Op::Sub(a, b) => {
                if self.wants(*b) {
                    self.accumulate(grads, *b, reduce_to_shape(g.map(|x| -x), val(*b).shape()));
                }
                self.accumulate(grads, *a, reduce_to_shape(g, val(*a).shape()));
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let is_div = matches!(node.op, Op::Div(..));
                let (va, vb) = (val(*a), val(*b));
                let shape = g.shape().to_vec();
                let oa = broadcast_offsets(&shape, va.shape());
                let ob = broadcast_offsets(&shape, vb.shape());
                let (da, db) = (va.data(), vb.data());
                if self.wants(*a) {
                    let data = g
                        .data()
                        .iter()
                        .zip(&ob)
                        .map(|(&gi, &j)| {
                            if is_div {
                                gi / clamp_magnitude(db[j])
                            } else {
                                gi * db[j]
                            }
                        })
                        .collect();
                    let t = Tensor::new(shape.clone(), data).expect("grad shape");
                    self.accumulate(grads, *a, reduce_to_shape(t, va.shape()));
                }
                if self.wants(*b) {
                    let data = g
                        .data()
                        .iter()
                        .zip(oa.iter().zip(&ob))
                        .map(|(&gi, (&ia, &jb))| {
                            if !is_div {
                                gi * da[ia]
                            } else if db[jb].abs() < CLAMP_EPS {
                                0.0
                            } else {
                                -gi * da[ia] / (db[jb] * db[jb])
                            }
                        })
                        .collect();
                    let t = Tensor::new(shape, data).expect("grad shape");
                    self.accumulate(grads, *b, reduce_to_shape(t, vb.shape()));
                }
            }
            Op::Relu(a) => {
                let x = val(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 });
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), d.collect()).unwrap());
            }
            Op::Exp(a) => {
                let d = g.data().iter().zip(out.data()).map(|(gi, yi)| gi * yi);
                self.accumulate(grads, *a, Tensor::new(out.shape().to_vec(), d.collect()).unwrap());
            }
            Op::Log(a) => {
                let x = val(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gi, &xi)| if xi >= CLAMP_EPS { gi / xi } else { 0.0 });
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), d.collect()).unwrap());
            }
            Op::Tanh(a) => {
                let d = g.data().iter().zip(out.data()).map(|(gi, yi)| gi * (1.0 - yi * yi));
                self.accumulate(grads, *a, Tensor::new(out.shape().to_vec(), d.collect()).unwrap());
            }
            Op::Sigmoid(a) => {
                let d = g.data().iter().zip(out.data()).map(|(gi, yi)| gi * yi * (1.0 - yi));
                self.accumulate(grads, *a, Tensor::new(out.shape().to_vec(), d.collect()).unwrap());
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, g.map(|x| x * c));
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g),
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.wants(*a) {
                    let mut d = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g.data(), false, vb.data(), true, 0.0, &mut d);
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], d).unwrap());
                }
                if self.wants(*b) {
                    let mut d = vec![0.0; k * n];
                    kernels::gemm(k, m, n, va.data(), true, g.data(), false, 0.0, &mut d);
                    self.accumulate(grads, *b, Tensor::new(vec![k, n], d).unwrap());
                }
            }
            Op::MatMulT(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[0]);
                if self.wants(*a) {
                    let mut d = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g.data(), false, vb.data(), false, 0.0, &mut d);
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], d).unwrap());
                }
                if self.wants(*b) {
                    let mut d = vec![0.0; n * k];
                    kernels::gemm(n, m, k, g.data(), true, va.data(), false, 0.0, &mut d);
                    self.accumulate(grads, *b, Tensor::new(vec![n, k], d).unwrap());
                }
            }
            Op::Conv2d { input, kernel, bias } => {
                let (vi, vk) = (val(*input), val(*kernel));
                let [n, c, h, w] = *vi.shape() else { unreachable!() };
                let f = vk.shape()[0];
                let dims = ConvDims { n, c, h, w, f };
                let mut gi = self.wants(*input).then(|| vec![0.0; vi.numel()]);
                let mut gk = self.wants(*kernel).then(|| vec![0.0; vk.numel()]);
                let mut gb = self.wants(*bias).then(|| vec![0.0; f]);
                kernels::conv2d_backward(
                    &dims,
                    vi.data(),
                    vk.data(),
                    g.data(),
                    gi.as_deref_mut(),
                    gk.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                if let Some(d) = gi {
                    self.accumulate(grads, *input, Tensor::new(vi.shape().to_vec(), d).unwrap());
                }
                if let Some(d) = gk {
                    self.accumulate(grads, *kernel, Tensor::new(vk.shape().to_vec(), d).unwrap());
                }
                if let Some(d) = gb {
                    self.accumulate(grads, *bias, Tensor::new(vec![f], d).unwrap());
                }
            }
            Op::MaxPool2d { input, argmax } => {
                let vi = val(*input);
                let mut d = vec![0.0; vi.numel()];
                for (&gi, &src) in g.data().iter().zip(argmax) {
                    d[src as usize] += gi;
                }
                self.accumulate(grads, *input, Tensor::new(vi.shape().to_vec(), d).unwrap());
            }
            Op::Sum { input, axis } | Op::Mean { input, axis } => {
                let vi = val(*input);
                let scale = match (&node.op, axis) {
                    (Op::Mean { .. }, None) => 1.0 / vi.numel() as f64,
                    (Op::Mean { .. }, Some(ax)) => 1.0 / vi.shape()[*ax] as f64,
                    _ => 1.0,
                };
                let d = match axis {
                    None => vec![g.item() * scale; vi.numel()],
                    Some(ax) => {
                        let (outer, len, inner) = axis_extents(vi.shape(), *ax);
                        let mut d = Vec::with_capacity(vi.numel());
                        for o in 0..outer {
                            let src = &g.data()[o * inner..(o + 1) * inner];
                            for _ in 0..len {
                                d.extend(src.iter().map(|x| x * scale));
                            }
                        }
                        d
                    }
                };
                self.accumulate(grads, *input, Tensor::new(vi.shape().to_vec(), d).unwrap());
            }
            Op::Max { input, argmax, .. } => {
                let vi = val(*input);
                let mut d = vec![0.0; vi.numel()];
                for (&gi, &src) in g.data().iter().zip(argmax) {
                    d[src] += gi;
                }
                self.accumulate(grads, *input, Tensor::new(vi.shape().to_vec(), d).unwrap());
            }
            Op::Reshape(a) => {
                let shape = val(*a).shape().to_vec();
                self.accumulate(grads, *a, g.reshape(&shape).unwrap());
            }
            Op::Permute(a, perm) => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let (shape, data) = permute_data(g.data(), g.shape(), &inverse);
                self.accumulate(grads, *a, Tensor::new(shape, data).unwrap());
            }
            Op::Narrow { input, axis, start } => {
                let vi = val(*input);
                let (outer, full, inner) = axis_extents(vi.shape(), *axis);
                let len = g.shape()[*axis];
                let mut d = vec![0.0; vi.numel()];
                for o in 0..outer {
                    d[(o * full + start) * inner..(o * full + start + len) * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *input, Tensor::new(vi.shape().to_vec(), d).unwrap());
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_extents(g.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let shape = val(v).shape();
                    let len = shape[*axis];
                    if self.wants(v) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            d.extend_from_slice(
                                &g.data()[(o * total + offset) * inner..(o * total + offset + len) * inner],
                            );
                        }
                        self.accumulate(grads, v, Tensor::new(shape.to_vec(), d).unwrap());
                    }
                    offset += len;
                }
            }
        }
    }
}
