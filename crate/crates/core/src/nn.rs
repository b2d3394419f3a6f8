//! Parameterized building blocks. Each layer knows its parameter names and
//! shapes; the arrays themselves live in a [`ParamStore`].

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use libm::sqrt;

use crate::error::Result;
use crate::graph::{Axis, Graph, Var};
use crate::params::{uniform, ParamStore};
use crate::tensor::{sinusoidal_2d, ConvGeom, PadMode, Tensor};

/// `y = x W + b` over rows of `x: [n, input]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, input: usize, output: usize) -> Self {
        Self { name: name.into(), input, output }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        let bound = 1.0 / sqrt(self.input as f64);
        let (w, b) = (self.weight_name(), self.bias_name());
        store.insert(w.clone(), uniform(seed, &w, &[self.input, self.output], bound));
        store.insert(b.clone(), uniform(seed, &b, &[self.output], bound));
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, &self.weight_name())?;
        let b = g.param(store, &self.bias_name())?;
        let y = g.matmul(x, w);
        Ok(g.add(y, b))
    }
}

/// How a [`Conv2d`] pads its input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Stride 1, output the size of the input.
    Same(PadMode),
    /// Symmetric padding of the given width.
    Fixed(usize, PadMode),
    /// Non-overlapping tiles; kernel = stride, ragged borders zero padded.
    Patches,
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub input: usize,
    pub output: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: Padding,
}

impl Conv2d {
    pub fn same(name: impl Into<String>, input: usize, output: usize, kernel: usize, mode: PadMode) -> Self {
        Self { name: name.into(), input, output, kernel, stride: 1, dilation: 1, padding: Padding::Same(mode) }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        let fan_in = self.input * self.kernel * self.kernel;
        let bound = 1.0 / sqrt(fan_in as f64);
        let (w, b) = (self.weight_name(), self.bias_name());
        store.insert(w.clone(), uniform(seed, &w, &[self.output, self.input, self.kernel, self.kernel], bound));
        store.insert(b.clone(), uniform(seed, &b, &[self.output], bound));
    }

    pub fn geometry(&self, height: usize, width: usize) -> ConvGeom {
        match self.padding {
            Padding::Same(mode) => ConvGeom::same(self.kernel, self.dilation, mode),
            Padding::Fixed(p, mode) => ConvGeom { dilation: self.dilation, ..ConvGeom::strided(self.stride, p, mode) },
            Padding::Patches => ConvGeom::patches(self.kernel, height, width),
        }
    }

    /// `x: [input, H, W]` → `[output, Ho, Wo]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = g.value(x).shape();
        let geom = self.geometry(shape[1], shape[2]);
        let w = g.param(store, &self.weight_name())?;
        let b = g.param(store, &self.bias_name())?;
        Ok(g.conv2d(x, w, Some(b), geom))
    }
}

/// Transposed convolution with kernel = stride (pure upsampling by `stride`).
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub name: String,
    pub input: usize,
    pub output: usize,
    pub stride: usize,
}

impl ConvTranspose2d {
    pub fn new(name: impl Into<String>, input: usize, output: usize, stride: usize) -> Self {
        Self { name: name.into(), input, output, stride }
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        let bound = 1.0 / sqrt(self.input as f64);
        let w = format!("{}.weight", self.name);
        let b = format!("{}.bias", self.name);
        store.insert(w.clone(), uniform(seed, &w, &[self.input, self.output, self.stride, self.stride], bound));
        store.insert(b.clone(), uniform(seed, &b, &[self.output], bound));
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, &format!("{}.weight", self.name))?;
        let b = g.param(store, &format!("{}.bias", self.name))?;
        Ok(g.conv_transpose(x, w, Some(b), self.stride))
    }
}

/// Affine layer normalization over the last axis.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        Self { name: name.into(), dim }
    }

    pub fn init(&self, store: &mut ParamStore) {
        store.insert(format!("{}.gamma", self.name), Tensor::full(&[self.dim], 1.0));
        store.insert(format!("{}.beta", self.name), Tensor::zeros(&[self.dim]));
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, &format!("{}.gamma", self.name))?;
        let beta = g.param(store, &format!("{}.beta", self.name))?;
        let n = g.layer_norm_rows(x, LAYER_NORM_EPS);
        let s = g.mul(n, gamma);
        Ok(g.add(s, beta))
    }
}

/// Multi-head scaled dot-product attention with input and output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub dim: usize,
    pub heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
}

impl MultiHeadAttention {
    pub fn new(name: &str, dim: usize, heads: usize) -> Self {
        assert!(heads > 0 && dim % heads == 0, "attention width {dim} not divisible by {heads} heads");
        Self {
            dim,
            heads,
            query: Linear::new(format!("{name}.q"), dim, dim),
            key: Linear::new(format!("{name}.k"), dim, dim),
            value: Linear::new(format!("{name}.v"), dim, dim),
            out: Linear::new(format!("{name}.o"), dim, dim),
        }
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        for l in [&self.query, &self.key, &self.value, &self.out] {
            l.init(store, seed);
        }
    }

    /// `queries: [nq, dim]` attend over `context: [nk, dim]` → `[nq, dim]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, queries: Var, context: Var) -> Result<Var> {
        let q = self.query.forward(g, store, queries)?;
        let k = self.key.forward(g, store, context)?;
        let v = self.value.forward(g, store, context)?;
        let head_dim = self.dim / self.heads;
        let scale = 1.0 / sqrt(head_dim as f64);
        let mut outputs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice(q, Axis::Last, h * head_dim, head_dim);
            let kh = g.slice(k, Axis::Last, h * head_dim, head_dim);
            let vh = g.slice(v, Axis::Last, h * head_dim, head_dim);
            let kt = g.transpose(kh);
            let scores = g.matmul(qh, kt);
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores);
            outputs.push(g.matmul(attn, vh));
        }
        let joined = if outputs.len() == 1 { outputs[0] } else { g.concat(&outputs, Axis::Last) };
        self.out.forward(g, store, joined)
    }
}

/// Non-overlapping patch projection to tokens plus fixed 2-D sinusoidal
/// positional encoding.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: Conv2d,
    pub dim: usize,
}

impl PatchEmbed {
    pub fn new(name: impl Into<String>, channels: usize, dim: usize, patch: usize) -> Self {
        let proj = Conv2d {
            name: name.into(),
            input: channels,
            output: dim,
            kernel: patch,
            stride: patch,
            dilation: 1,
            padding: Padding::Patches,
        };
        Self { proj, dim }
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        self.proj.init(store, seed);
    }

    /// `x: [C, H, W]` → tokens `[N, dim]` and the `(rows, cols)` patch grid.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<(Var, (usize, usize))> {
        let y = self.proj.forward(g, store, x)?;
        let (rows, cols) = (g.value(y).shape()[1], g.value(y).shape()[2]);
        let flat = g.reshape(y, &[self.dim, rows * cols]);
        let tokens = g.transpose(flat);
        let pe = g.constant(sinusoidal_2d(rows, cols, self.dim));
        Ok((g.add(tokens, pe), (rows, cols)))
    }
}
