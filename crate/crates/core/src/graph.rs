//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value, and [`Graph::backward`] walks the tape in reverse. Graphs are built
//! per sample and dropped after the backward pass.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{dims3, dims4, gelu, gelu_grad, gemm, sigmoid, ConvGeom, Im2Col, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    First,
    Last,
    Index(usize),
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Sigmoid(Var),
    Gelu(Var),
    Ln(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNormRows(Var, f64),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    ConvTranspose { x: Var, w: Var, b: Option<Var>, stride: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    SumAll(Var),
    MeanLast(Var),
    BceClipped { p: Var, target: Tensor, eps: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
    params: BTreeMap<String, Var>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, if it participates.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.by_node.get(var.0).and_then(Option::as_ref)
    }

    /// Gradients keyed by parameter name, for every parameter bound on the
    /// graph. Parameters bound but not reached by the loss get zeros.
    pub fn into_param_grads(mut self, graph: &Graph) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, var) in &self.params {
            let g = self.by_node[var.0]
                .take()
                .unwrap_or_else(|| Tensor::zeros(graph.value(*var).shape()));
            out.insert(name.clone(), g);
        }
        out
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            panic!("shapes {a:?} and {b:?} do not broadcast");
        };
    }
    out
}

/// Strides of `shape` laid over `out` (zero along broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + rank - shape.len();
        strides[oi] = if shape[i] == 1 && out[oi] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Visits every output element with its flat indices into `a` and `b`.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let total: usize = out.iter().product();
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..total {
        f(o, ia, ib);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn last_dim(t: &Tensor) -> (usize, usize) {
    let n = *t.shape().last().expect("row op on a scalar");
    (t.len() / n.max(1), n)
}

impl Graph {
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant input: no gradient is tracked through it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is recorded (for input-gradient checks).
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds the named parameter of `store`, reusing the node if it is already bound.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(v) = self.params.get(name) {
            return Ok(*v);
        }
        let value = store.get(name).ok_or_else(|| Error::Uninitialized(name.to_string()))?.clone();
        let v = self.push(value, Op::Leaf, true);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Names of every parameter bound so far, in sorted order.
    pub fn bound_params(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let value = if va.shape() == vb.shape() {
            let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
            Tensor::from_vec(va.shape(), data)
        } else {
            let shape = broadcast_shape(va.shape(), vb.shape());
            let sa = broadcast_strides(va.shape(), &shape);
            let sb = broadcast_strides(vb.shape(), &shape);
            let mut out = vec![0.0; shape.iter().product()];
            let (da, db) = (va.data(), vb.data());
            for_each_broadcast(&shape, &sa, &sb, |o, ia, ib| out[o] = f(da[ia], db[ib]));
            Tensor::from_vec(&shape, out)
        };
        let ng = self.needs(a) || self.needs(b);
        self.push(value, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        let ng = self.needs(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    /// `a + s` elementwise.
    pub fn shift(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x + s);
        let ng = self.needs(a);
        self.push(value, Op::Shift(a), ng)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (&[m, k], &[k2, n]) = (va.shape(), vb.shape()) else {
            panic!("matmul expects rank-2 operands, got {:?} and {:?}", va.shape(), vb.shape());
        };
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, va.data(), false, vb.data(), false, 0.0, &mut out);
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::from_vec(&[m, n], out), Op::MatMul(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let &[m, n] = va.shape() else { panic!("transpose expects rank 2") };
        let value = Tensor::from_vec(&[n, m], transpose_data(va.data(), m, n));
        let ng = self.needs(a);
        self.push(value, Op::Transpose(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self.value(a).clone().reshaped(shape);
        let ng = self.needs(a);
        self.push(value, Op::Reshape(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let ng = self.needs(a);
        self.push(value, Op::Sigmoid(a), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let ng = self.needs(a);
        self.push(value, Op::Gelu(a), ng)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).map(libm::log);
        let ng = self.needs(a);
        self.push(value, Op::Ln(a), ng)
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let (rows, n) = last_dim(va);
        let mut out = va.data().to_vec();
        for r in 0..rows {
            let row = &mut out[r * n..(r + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = libm::exp(*v - max);
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let value = Tensor::from_vec(va.shape(), out);
        let ng = self.needs(a);
        self.push(value, Op::SoftmaxRows(a), ng)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let (rows, n) = last_dim(va);
        let mut out = va.data().to_vec();
        for r in 0..rows {
            let row = &mut out[r * n..(r + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + libm::log(row.iter().map(|v| libm::exp(v - max)).sum::<f64>());
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let value = Tensor::from_vec(va.shape(), out);
        let ng = self.needs(a);
        self.push(value, Op::LogSoftmaxRows(a), ng)
    }

    /// Normalizes every row (last axis) to zero mean and unit variance.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let va = self.value(a);
        let (rows, n) = last_dim(va);
        let mut out = va.data().to_vec();
        for r in 0..rows {
            let row = &mut out[r * n..(r + 1) * n];
            let (mean, rstd) = moments(row, eps);
            for v in row.iter_mut() {
                *v = (*v - mean) * rstd;
            }
        }
        let value = Tensor::from_vec(va.shape(), out);
        let ng = self.needs(a);
        self.push(value, Op::LayerNormRows(a, eps), ng)
    }

    /// Cross-correlation of `x: [C, H, W]` with `w: [O, C, kh, kw]` plus optional bias `[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Var {
        let value = crate::tensor::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), &geom);
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(value, Op::Conv2d { x, w, b, geom }, ng)
    }

    /// Transposed convolution with kernel size equal to `stride` (non-overlapping
    /// upsampling). `x: [C, h, w]`, `w: [C, O, s, s]`, bias `[O]` → `[O, h*s, w*s]`.
    pub fn conv_transpose(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        let [c, h, wd] = dims3(vx);
        let [wc, o, kh, kw] = dims4(vw);
        assert!(wc == c && kh == stride && kw == stride, "conv_transpose shape mismatch");
        let hw = h * wd;
        let cols = o * stride * stride;
        // y[(o,i,j), p] = sum_c w[c, (o,i,j)] * x[c, p]
        let mut y = vec![0.0; cols * hw];
        gemm(cols, c, hw, vw.data(), true, vx.data(), false, 0.0, &mut y);
        let (oh, ow) = (h * stride, wd * stride);
        let mut out = vec![0.0; o * oh * ow];
        for oc in 0..o {
            let bias = b.map_or(0.0, |b| self.value(b).data()[oc]);
            for i in 0..stride {
                for j in 0..stride {
                    let row = &y[((oc * stride + i) * stride + j) * hw..][..hw];
                    for yy in 0..h {
                        for xx in 0..wd {
                            out[(oc * oh + yy * stride + i) * ow + xx * stride + j] = row[yy * wd + xx] + bias;
                        }
                    }
                }
            }
        }
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(Tensor::from_vec(&[o, oh, ow], out), Op::ConvTranspose { x, w, b, stride }, ng)
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Var {
        let first = self.value(parts[0]).shape().to_vec();
        let axis = resolve_axis(axis, first.len());
        let (outer, _, inner) = split_axis(&first, axis);
        let mut total = 0;
        for p in parts {
            let s = self.value(*p).shape();
            assert!(
                s.len() == first.len() && s[..axis] == first[..axis] && s[axis + 1..] == first[axis + 1..],
                "concat shape mismatch"
            );
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let v = self.value(*p);
                let len = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let ng = parts.iter().any(|p| self.needs(*p));
        self.push(Tensor::from_vec(&shape, out), Op::Concat { parts: parts.to_vec(), axis }, ng)
    }

    pub fn slice(&mut self, x: Var, axis: Axis, start: usize, len: usize) -> Var {
        let vx = self.value(x);
        let axis = resolve_axis(axis, vx.rank());
        let (outer, n, inner) = split_axis(vx.shape(), axis);
        assert!(start + len <= n, "slice out of range");
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&vx.data()[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut shape = vx.shape().to_vec();
        shape[axis] = len;
        let ng = self.needs(x);
        self.push(Tensor::from_vec(&shape, out), Op::Slice { x, axis, start }, ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Mean over the last axis, dropping it.
    pub fn mean_last(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let (rows, n) = last_dim(va);
        let out = (0..rows).map(|r| va.data()[r * n..(r + 1) * n].iter().sum::<f64>() / n as f64).collect();
        let shape = &va.shape()[..va.rank() - 1];
        let value = Tensor::from_vec(shape, out);
        let ng = self.needs(a);
        self.push(value, Op::MeanLast(a), ng)
    }

    /// Mean binary cross-entropy of probabilities `p` against a constant
    /// target, with `p` clipped to `[eps, 1 - eps]`.
    pub fn bce_clipped(&mut self, p: Var, target: &Tensor, eps: f64) -> Var {
        let vp = self.value(p);
        assert_eq!(vp.shape(), target.shape(), "bce shape mismatch");
        let n = vp.len() as f64;
        let loss: f64 = vp
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| {
                let q = p.clamp(eps, 1.0 - eps);
                -(t * libm::log(q) + (1.0 - t) * libm::log(1.0 - q))
            })
            .sum::<f64>()
            / n;
        let ng = self.needs(p);
        self.push(Tensor::scalar(loss), Op::BceClipped { p, target: target.clone(), eps }, ng)
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { by_node: grads, params: self.params.clone() }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Sums `g` (shaped like the broadcast output) down to `v`'s shape,
    /// applying `scale(i_out, i_a, i_b)` per element.
    fn reduce_to(
        &self,
        v: Var,
        other: Var,
        out_shape: &[usize],
        g: &Tensor,
        first: bool,
        scale: impl Fn(usize, usize, usize) -> f64,
    ) -> Tensor {
        let (va, vo) = (self.value(v), self.value(other));
        let (sa, sb) = if first {
            (broadcast_strides(va.shape(), out_shape), broadcast_strides(vo.shape(), out_shape))
        } else {
            (broadcast_strides(vo.shape(), out_shape), broadcast_strides(va.shape(), out_shape))
        };
        let mut out = vec![0.0; va.len()];
        let gd = g.data();
        for_each_broadcast(out_shape, &sa, &sb, |o, ia, ib| {
            let target = if first { ia } else { ib };
            out[target] += gd[o] * scale(o, ia, ib);
        });
        Tensor::from_vec(va.shape(), out)
    }

    fn binary_grads(
        &self,
        a: Var,
        b: Var,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        da: impl Fn(f64, f64) -> f64,
        db: impl Fn(f64, f64) -> f64,
    ) {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() == vb.shape() {
            if self.needs(a) {
                let d = g.data().iter().zip(va.data().iter().zip(vb.data())).map(|(g, (x, y))| g * da(*x, *y)).collect();
                self.accumulate(grads, a, Tensor::from_vec(va.shape(), d));
            }
            if self.needs(b) {
                let d = g.data().iter().zip(va.data().iter().zip(vb.data())).map(|(g, (x, y))| g * db(*x, *y)).collect();
                self.accumulate(grads, b, Tensor::from_vec(vb.shape(), d));
            }
            return;
        }
        let out_shape = g.shape().to_vec();
        let (xa, xb) = (va.data(), vb.data());
        if self.needs(a) {
            let t = self.reduce_to(a, b, &out_shape, g, true, |_, ia, ib| da(xa[ia], xb[ib]));
            self.accumulate(grads, a, t);
        }
        if self.needs(b) {
            let t = self.reduce_to(b, a, &out_shape, g, false, |_, ia, ib| db(xa[ia], xb[ib]));
            self.accumulate(grads, b, t);
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => self.binary_grads(*a, *b, g, grads, |_, _| 1.0, |_, _| 1.0),
            Op::Sub(a, b) => self.binary_grads(*a, *b, g, grads, |_, _| 1.0, |_, _| -1.0),
            Op::Mul(a, b) => self.binary_grads(*a, *b, g, grads, |_, y| y, |x, _| x),
            Op::Div(a, b) => self.binary_grads(*a, *b, g, grads, |_, y| 1.0 / y, |x, y| -x / (y * y)),
            Op::Scale(a, s) => self.accumulate(grads, *a, g.map(|v| v * s)),
            Op::Shift(a) => self.accumulate(grads, *a, g.clone()),
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.needs(*a) {
                    let mut d = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, vb.data(), true, 0.0, &mut d);
                    self.accumulate(grads, *a, Tensor::from_vec(&[m, k], d));
                }
                if self.needs(*b) {
                    let mut d = vec![0.0; k * n];
                    gemm(k, m, n, va.data(), true, g.data(), false, 0.0, &mut d);
                    self.accumulate(grads, *b, Tensor::from_vec(&[k, n], d));
                }
            }
            Op::Transpose(a) => {
                let &[n, m] = g.shape() else { unreachable!() };
                self.accumulate(grads, *a, Tensor::from_vec(&[m, n], transpose_data(g.data(), n, m)));
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, g.clone().reshaped(&shape));
            }
            Op::Sigmoid(a) => {
                let d = g.data().iter().zip(out.data()).map(|(g, s)| g * s * (1.0 - s)).collect();
                self.accumulate(grads, *a, Tensor::from_vec(out.shape(), d));
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let d = g.data().iter().zip(x.data()).map(|(g, x)| g * gelu_grad(*x)).collect();
                self.accumulate(grads, *a, Tensor::from_vec(out.shape(), d));
            }
            Op::Ln(a) => {
                let x = self.value(*a);
                let d = g.data().iter().zip(x.data()).map(|(g, x)| g / x).collect();
                self.accumulate(grads, *a, Tensor::from_vec(out.shape(), d));
            }
            Op::SoftmaxRows(a) => {
                let (rows, n) = last_dim(out);
                let mut d = vec![0.0; out.len()];
                for r in 0..rows {
                    let s = &out.data()[r * n..(r + 1) * n];
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let dot: f64 = s.iter().zip(gr).map(|(s, g)| s * g).sum();
                    for i in 0..n {
                        d[r * n + i] = s[i] * (gr[i] - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::from_vec(out.shape(), d));
            }
            Op::LogSoftmaxRows(a) => {
                let (rows, n) = last_dim(out);
                let mut d = vec![0.0; out.len()];
                for r in 0..rows {
                    let ls = &out.data()[r * n..(r + 1) * n];
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let total: f64 = gr.iter().sum();
                    for i in 0..n {
                        d[r * n + i] = gr[i] - libm::exp(ls[i]) * total;
                    }
                }
                self.accumulate(grads, *a, Tensor::from_vec(out.shape(), d));
            }
            Op::LayerNormRows(a, eps) => {
                let x = self.value(*a);
                let (rows, n) = last_dim(out);
                let mut d = vec![0.0; out.len()];
                for r in 0..rows {
                    let (_, rstd) = moments(&x.data()[r * n..(r + 1) * n], *eps);
                    let y = &out.data()[r * n..(r + 1) * n];
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let mean_g = gr.iter().sum::<f64>() / n as f64;
                    let mean_gy = gr.iter().zip(y).map(|(g, y)| g * y).sum::<f64>() / n as f64;
                    for i in 0..n {
                        d[r * n + i] = rstd * (gr[i] - mean_g - y[i] * mean_gy);
                    }
                }
                self.accumulate(grads, *a, Tensor::from_vec(out.shape(), d));
            }
            Op::Conv2d { x, w, b, geom } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let [c, h, wd] = dims3(vx);
                let [o, _, kh, kw] = dims4(vw);
                let im = Im2Col::new(c, h, wd, kh, kw, geom);
                let gd = g.data();
                if let Some(b) = b {
                    let d = gd.chunks(im.cols).map(|ch| ch.iter().sum()).collect();
                    self.accumulate(grads, *b, Tensor::from_vec(&[o], d));
                }
                if self.needs(*w) {
                    let cols = im.gather(vx.data());
                    let mut d = vec![0.0; o * im.rows];
                    gemm(o, im.cols, im.rows, gd, false, &cols, true, 0.0, &mut d);
                    self.accumulate(grads, *w, Tensor::from_vec(vw.shape(), d));
                }
                if self.needs(*x) {
                    let mut dcols = vec![0.0; im.rows * im.cols];
                    gemm(im.rows, o, im.cols, vw.data(), true, gd, false, 0.0, &mut dcols);
                    let mut dx = vec![0.0; vx.len()];
                    im.scatter_add(&dcols, &mut dx);
                    self.accumulate(grads, *x, Tensor::from_vec(vx.shape(), dx));
                }
            }
            Op::ConvTranspose { x, w, b, stride } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let [c, h, wd] = dims3(vx);
                let [_, o, _, _] = dims4(vw);
                let s = *stride;
                let hw = h * wd;
                let (oh, ow) = (h * s, wd * s);
                let rows = o * s * s;
                let gd = g.data();
                let mut gy = vec![0.0; rows * hw];
                for oc in 0..o {
                    for i in 0..s {
                        for j in 0..s {
                            let row = &mut gy[((oc * s + i) * s + j) * hw..][..hw];
                            for yy in 0..h {
                                for xx in 0..wd {
                                    row[yy * wd + xx] = gd[(oc * oh + yy * s + i) * ow + xx * s + j];
                                }
                            }
                        }
                    }
                }
                if let Some(b) = b {
                    let d = gd.chunks(oh * ow).map(|ch| ch.iter().sum()).collect();
                    self.accumulate(grads, *b, Tensor::from_vec(&[o], d));
                }
                if self.needs(*w) {
                    let mut d = vec![0.0; c * rows];
                    gemm(c, hw, rows, vx.data(), false, &gy, true, 0.0, &mut d);
                    self.accumulate(grads, *w, Tensor::from_vec(vw.shape(), d));
                }
                if self.needs(*x) {
                    let mut d = vec![0.0; c * hw];
                    gemm(c, rows, hw, vw.data(), false, &gy, false, 0.0, &mut d);
                    self.accumulate(grads, *x, Tensor::from_vec(vx.shape(), d));
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(g.shape(), *axis);
                let mut offset = 0;
                for p in parts {
                    let vp = self.value(*p);
                    let n = vp.shape()[*axis];
                    if self.needs(*p) {
                        let mut d = Vec::with_capacity(vp.len());
                        for o in 0..outer {
                            d.extend_from_slice(&g.data()[(o * total + offset) * inner..(o * total + offset + n) * inner]);
                        }
                        self.accumulate(grads, *p, Tensor::from_vec(vp.shape(), d));
                    }
                    offset += n;
                }
            }
            Op::Slice { x, axis, start } => {
                let vx = self.value(*x);
                let (outer, n, inner) = split_axis(vx.shape(), *axis);
                let len = g.shape()[*axis];
                let mut d = vec![0.0; vx.len()];
                for o in 0..outer {
                    d[(o * n + start) * inner..(o * n + start + len) * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *x, Tensor::from_vec(vx.shape(), d));
            }
            Op::SumAll(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::full(&shape, g.item()));
            }
            Op::MeanLast(a) => {
                let va = self.value(*a);
                let (rows, n) = last_dim(va);
                let mut d = vec![0.0; va.len()];
                for r in 0..rows {
                    let gv = g.data()[r] / n as f64;
                    d[r * n..(r + 1) * n].fill(gv);
                }
                self.accumulate(grads, *a, Tensor::from_vec(va.shape(), d));
            }
            Op::BceClipped { p, target, eps } => {
                let vp = self.value(*p);
                let n = vp.len() as f64;
                let gs = g.item();
                let d = vp
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&p, &t)| {
                        if p < *eps || p > 1.0 - eps {
                            0.0
                        } else {
                            gs * (-(t / p) + (1.0 - t) / (1.0 - p)) / n
                        }
                    })
                    .collect();
                self.accumulate(grads, *p, Tensor::from_vec(vp.shape(), d));
            }
        }
    }
}

fn resolve_axis(axis: Axis, rank: usize) -> usize {
    match axis {
        Axis::First => 0,
        Axis::Last => rank - 1,
        Axis::Index(i) => {
            assert!(i < rank, "axis {i} out of range for rank {rank}");
            i
        }
    }
}

fn transpose_data(src: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = src[i * n + j];
        }
    }
    out
}

fn moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / libm::sqrt(var + eps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::PadMode;

    fn wave(shape: &[usize], phase: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| libm::sin(1.7 * i as f64 + phase) * 0.8).collect())
    }

    /// Checks d(loss)/d(input) for a single-input graph builder against central differences.
    fn check(input: Tensor, build: impl Fn(&mut Graph, Var) -> Var) {
        let mut g = Graph::new();
        let x = g.variable(input.clone());
        let loss = build(&mut g, x);
        let grads = g.backward(loss);
        let analytic = grads.get(x).unwrap().clone();
        let h = 1e-6;
        for i in 0..input.len() {
            let eval = |delta: f64| {
                let mut t = input.clone();
                t.data_mut()[i] += delta;
                let mut g = Graph::new();
                let x = g.variable(t);
                let l = build(&mut g, x);
                g.value(l).item()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            assert!((fd - a).abs() <= 1e-6 * (1.0 + a.abs()), "index {i}: fd {fd} vs analytic {a}");
        }
    }

    fn weighted_sum(g: &mut Graph, y: Var) -> Var {
        let w = wave(g.value(y).shape(), 0.3);
        let w = g.constant(w);
        let p = g.mul(y, w);
        g.sum_all(p)
    }

    #[test]
    fn broadcasting_binary_ops() {
        check(wave(&[3, 1, 4], 0.0), |g, x| {
            let c = g.constant(wave(&[2, 1], 1.0).map(|v| v + 2.0));
            let a = g.add(x, c);
            let m = g.mul(a, x);
            let d = g.div(m, c);
            let s = g.sub(d, x);
            weighted_sum(g, s)
        });
    }

    #[test]
    fn matmul_transpose_softmax() {
        check(wave(&[3, 4], 0.2), |g, x| {
            let t = g.transpose(x);
            let m = g.matmul(x, t);
            let s = g.softmax_rows(m);
            let l = g.log_softmax_rows(x);
            let a = weighted_sum(g, s);
            let b = weighted_sum(g, l);
            g.add(a, b)
        });
    }

    #[test]
    fn layer_norm_gelu_sigmoid() {
        check(wave(&[2, 5], 0.9), |g, x| {
            let n = g.layer_norm_rows(x, 1e-5);
            let a = g.gelu(n);
            let s = g.sigmoid(a);
            let m = g.mean_last(s);
            weighted_sum(g, m)
        });
    }

    #[test]
    fn conv_reflect_dilated() {
        let w = wave(&[2, 3, 3, 3], 0.5);
        check(wave(&[3, 7, 8], 0.1), move |g, x| {
            let wv = g.constant(w.clone());
            let y = g.conv2d(x, wv, None, ConvGeom::same(3, 2, PadMode::Reflect));
            weighted_sum(g, y)
        });
        let x = wave(&[3, 7, 8], 0.1);
        check(wave(&[2, 3, 3, 3], 0.5), move |g, w| {
            let xv = g.constant(x.clone());
            let b = g.constant(Tensor::from_vec(&[2], vec![0.1, -0.2]));
            let y = g.conv2d(xv, w, Some(b), ConvGeom::strided(2, 1, PadMode::Zero));
            weighted_sum(g, y)
        });
    }

    #[test]
    fn conv_transpose_grads() {
        let w = wave(&[3, 2, 2, 2], 0.4);
        check(wave(&[3, 2, 3], 0.0), move |g, x| {
            let wv = g.constant(w.clone());
            let y = g.conv_transpose(x, wv, None, 2);
            weighted_sum(g, y)
        });
        let x = wave(&[3, 2, 3], 0.0);
        check(wave(&[3, 2, 2, 2], 0.4), move |g, w| {
            let xv = g.constant(x.clone());
            let y = g.conv_transpose(xv, w, None, 2);
            weighted_sum(g, y)
        });
    }

    #[test]
    fn concat_slice_reshape() {
        check(wave(&[2, 3, 2], 0.6), |g, x| {
            let a = g.slice(x, Axis::Index(1), 1, 2);
            let b = g.concat(&[x, a], Axis::Index(1));
            let r = g.reshape(b, &[2, 10]);
            let q = g.mul(r, r);
            weighted_sum(g, q)
        });
    }

    #[test]
    fn bce_and_ln() {
        let target = Tensor::from_vec(&[4], vec![1.0, 0.0, 1.0, 0.0]);
        check(Tensor::from_vec(&[4], vec![0.2, 0.4, 0.7, 0.9]), move |g, p| {
            let b = g.bce_clipped(p, &target, 1e-7);
            let l = g.ln(p);
            let s = g.sum_all(l);
            g.add(b, s)
        });
    }

    #[test]
    fn conv_transpose_places_kernel_blocks() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(&[1, 1, 2], vec![1.0, 2.0]));
        let w = g.constant(Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let y = g.conv_transpose(x, w, None, 2);
        assert_eq!(g.value(y).shape(), &[1, 2, 4]);
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 2.0, 4.0, 3.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn unbound_params_are_reported_as_uninitialized() {
        let store = ParamStore::default();
        let mut g = Graph::new();
        assert!(matches!(g.param(&store, "missing"), Err(Error::Uninitialized(_))));
    }
}
