//! Dense row-major `f64` tensors and the numeric kernels shared by the
//! autodiff tape and the fixed (non-trainable) filters.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

/// A dense, row-major, double-precision array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    /// Panics if `data.len()` does not match the shape.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length does not match shape {shape:?}"
        );
        Self { shape: shape.to_vec(), data }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape.to_vec();
        self
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Tensor, scale: f64) {
        assert_eq!(self.shape, other.shape, "add_scaled shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| f64::max(m, libm::fabs(a - b)))
    }
}

/// Padding applied around the spatial axes of a convolution input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadMode {
    Zero,
    /// Mirror without repeating the edge sample (`dcb|abcd|cba`).
    Reflect,
}

/// Geometry of a 2-D convolution over a `[C, H, W]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub dilation: usize,
    pub pad_top: usize,
    pub pad_bottom: usize,
    pub pad_left: usize,
    pub pad_right: usize,
    pub mode: PadMode,
}

impl ConvGeom {
    /// Stride-1 geometry whose output has the input's spatial size.
    pub fn same(kernel: usize, dilation: usize, mode: PadMode) -> Self {
        let p = dilation * (kernel - 1) / 2;
        Self {
            stride: 1,
            dilation,
            pad_top: p,
            pad_bottom: p,
            pad_left: p,
            pad_right: p,
            mode,
        }
    }

    pub fn strided(stride: usize, pad: usize, mode: PadMode) -> Self {
        Self {
            stride,
            dilation: 1,
            pad_top: pad,
            pad_bottom: pad,
            pad_left: pad,
            pad_right: pad,
            mode,
        }
    }

    /// Non-overlapping `patch`×`patch` tiling; ragged borders are zero padded
    /// at the bottom/right so every pixel lands in exactly one patch.
    pub fn patches(patch: usize, height: usize, width: usize) -> Self {
        Self {
            stride: patch,
            dilation: 1,
            pad_top: 0,
            pad_bottom: height.div_ceil(patch) * patch - height,
            pad_left: 0,
            pad_right: width.div_ceil(patch) * patch - width,
            mode: PadMode::Zero,
        }
    }

    pub fn output_dims(&self, height: usize, width: usize, kh: usize, kw: usize) -> (usize, usize) {
        let span_h = self.dilation * (kh - 1) + 1;
        let span_w = self.dilation * (kw - 1) + 1;
        let ph = height + self.pad_top + self.pad_bottom;
        let pw = width + self.pad_left + self.pad_right;
        assert!(ph >= span_h && pw >= span_w, "convolution kernel larger than padded input");
        ((ph - span_h) / self.stride + 1, (pw - span_w) / self.stride + 1)
    }
}

/// Source index along one axis for every (tap, output position) pair, or
/// `None` when the tap falls in zero padding.
fn axis_map(
    len: usize,
    taps: usize,
    dilation: usize,
    stride: usize,
    pad_before: usize,
    out_len: usize,
    mode: PadMode,
) -> Vec<Option<usize>> {
    let mut map = Vec::with_capacity(taps * out_len);
    let n = len as isize;
    for t in 0..taps {
        for o in 0..out_len {
            let pos = (o * stride + t * dilation) as isize - pad_before as isize;
            let src = if (0..n).contains(&pos) {
                Some(pos as usize)
            } else {
                match mode {
                    PadMode::Zero => None,
                    PadMode::Reflect => {
                        let r = if pos < 0 { -pos } else { 2 * (n - 1) - pos };
                        assert!((0..n).contains(&r), "reflect padding wider than the input");
                        Some(r as usize)
                    }
                }
            };
            map.push(src);
        }
    }
    map
}

pub(crate) struct Im2Col {
    pub rows: usize,
    pub cols: usize,
    pub out_h: usize,
    pub out_w: usize,
    ymap: Vec<Option<usize>>,
    xmap: Vec<Option<usize>>,
    channels: usize,
    kh: usize,
    kw: usize,
    height: usize,
    width: usize,
}

impl Im2Col {
    pub fn new(channels: usize, height: usize, width: usize, kh: usize, kw: usize, geom: &ConvGeom) -> Self {
        let (out_h, out_w) = geom.output_dims(height, width, kh, kw);
        let ymap = axis_map(height, kh, geom.dilation, geom.stride, geom.pad_top, out_h, geom.mode);
        let xmap = axis_map(width, kw, geom.dilation, geom.stride, geom.pad_left, out_w, geom.mode);
        Self {
            rows: channels * kh * kw,
            cols: out_h * out_w,
            out_h,
            out_w,
            ymap,
            xmap,
            channels,
            kh,
            kw,
            height,
            width,
        }
    }

    pub fn gather(&self, input: &[f64]) -> Vec<f64> {
        let mut cols = vec![0.0; self.rows * self.cols];
        let plane = self.height * self.width;
        for c in 0..self.channels {
            let src = &input[c * plane..(c + 1) * plane];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let dst = &mut cols[row * self.cols..(row + 1) * self.cols];
                    let xs = &self.xmap[j * self.out_w..(j + 1) * self.out_w];
                    for oy in 0..self.out_h {
                        let Some(y) = self.ymap[i * self.out_h + oy] else { continue };
                        let line = &src[y * self.width..(y + 1) * self.width];
                        let out = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        for (o, x) in out.iter_mut().zip(xs) {
                            if let Some(x) = *x {
                                *o = line[x];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`Im2Col::gather`]: scatter-adds column gradients back onto the input.
    pub fn scatter_add(&self, cols: &[f64], input_grad: &mut [f64]) {
        let plane = self.height * self.width;
        for c in 0..self.channels {
            let dst = &mut input_grad[c * plane..(c + 1) * plane];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let src = &cols[row * self.cols..(row + 1) * self.cols];
                    let xs = &self.xmap[j * self.out_w..(j + 1) * self.out_w];
                    for oy in 0..self.out_h {
                        let Some(y) = self.ymap[i * self.out_h + oy] else { continue };
                        let g = &src[oy * self.out_w..(oy + 1) * self.out_w];
                        for (gv, x) in g.iter().zip(xs) {
                            if let Some(x) = *x {
                                dst[y * self.width + x] += gv;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` for row-major matrices, where
/// `op(a)` is `m×k` and `op(b)` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserted slice lengths cover every index addressed by the
    // (row stride, column stride) pairs above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Cross-correlation of a `[C, H, W]` input with `[O, C, kh, kw]` weights.
/// Returns the `[O, Ho, Wo]` output.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, geom: &ConvGeom) -> Tensor {
    let [c, h, w] = dims3(input);
    let [o, wc, kh, kw] = dims4(weight);
    assert_eq!(c, wc, "conv2d channel mismatch");
    let im = Im2Col::new(c, h, w, kh, kw, geom);
    let cols = im.gather(input.data());
    let mut out = vec![0.0; o * im.cols];
    if let Some(b) = bias {
        for (oc, chunk) in out.chunks_mut(im.cols).enumerate() {
            chunk.fill(b.data()[oc]);
        }
    }
    gemm(o, im.rows, im.cols, weight.data(), false, &cols, false, 1.0, &mut out);
    Tensor::from_vec(&[o, im.out_h, im.out_w], out)
}

pub(crate) fn dims3(t: &Tensor) -> [usize; 3] {
    match t.shape() {
        &[a, b, c] => [a, b, c],
        s => panic!("expected rank-3 tensor, got {s:?}"),
    }
}

pub(crate) fn dims4(t: &Tensor) -> [usize; 4] {
    match t.shape() {
        &[a, b, c, d] => [a, b, c, d],
        s => panic!("expected rank-4 tensor, got {s:?}"),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::tanh(GELU_C * (x + GELU_A * x * x * x)))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = libm::tanh(GELU_C * (x + GELU_A * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Fixed 2-D sinusoidal positional encoding for a `rows`×`cols` token grid,
/// returned as `[rows*cols, dim]`. The first half of the channels encodes the
/// row, the second half the column, each as interleaved sin/cos pairs.
pub fn sinusoidal_2d(rows: usize, cols: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0; rows * cols * dim];
    for r in 0..rows {
        for c in 0..cols {
            let tok = &mut out[(r * cols + c) * dim..(r * cols + c + 1) * dim];
            encode_axis(&mut tok[..half], r as f64);
            encode_axis(&mut tok[half..], c as f64);
        }
    }
    Tensor::from_vec(&[rows * cols, dim], out)
}

fn encode_axis(slot: &mut [f64], pos: f64) {
    let n = slot.len();
    let pairs = n.div_ceil(2).max(1);
    for (i, v) in slot.iter_mut().enumerate() {
        let freq = libm::pow(10_000.0, -((i / 2) as f64) / pairs as f64);
        *v = if i % 2 == 0 { libm::sin(pos * freq) } else { libm::cos(pos * freq) };
    }
}
