//! Dense tensor kernel with forward and analytic backward passes.
//!
//! Tensors are row-major with rank 1 to 4. Every kernel accumulates in `f64`
//! and stores back into the tensor's element type, so the same code runs at
//! `f32` for training and at `f64` for finite-difference gradient checks.

use std::collections::BTreeMap;
use std::fmt::Debug;

use crate::error::{Error, Result};

/// Scalar storage type of a [`Tensor`].
pub trait Element: Copy + Default + PartialOrd + Debug + Send + Sync + 'static {
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl Element for f32 {
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Element for f64 {
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S = f32> {
    dims: Vec<usize>,
    data: Vec<S>,
}

impl<S: Element> Tensor<S> {
    /// Builds a tensor, validating rank, extents, length and finiteness.
    pub fn new(dims: Vec<usize>, data: Vec<S>) -> Result<Self> {
        check_dims(&dims)?;
        let n: usize = dims.iter().product();
        if data.len() != n {
            return Err(Error::shape(format!(
                "data length {} does not match dims {:?} (expected {n})",
                data.len(),
                dims
            )));
        }
        if data.iter().any(|v| !v.to_f64().is_finite()) {
            return Err(Error::NonFinite("tensor data"));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::filled(dims, 0.0)
    }

    pub fn filled(dims: &[usize], value: f64) -> Result<Self> {
        check_dims(dims)?;
        if !value.is_finite() {
            return Err(Error::NonFinite("fill value"));
        }
        let n = dims.iter().product();
        Ok(Tensor {
            dims: dims.to_vec(),
            data: vec![S::from_f64(value); n],
        })
    }

    pub fn from_f64_vec(dims: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        Self::new(dims, values.into_iter().map(S::from_f64).collect())
    }

    /// Internal constructor for kernel outputs; still rejects non-finite results.
    fn from_acc(dims: Vec<usize>, acc: Vec<f64>, what: &'static str) -> Result<Self> {
        if acc.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(what));
        }
        Ok(Tensor {
            dims,
            data: acc.into_iter().map(S::from_f64).collect(),
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    /// Mutable view of the storage. Callers must keep the values finite.
    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    pub fn reshape(self, dims: Vec<usize>) -> Result<Self> {
        check_dims(&dims)?;
        if dims.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {:?}",
                self.dims, dims
            )));
        }
        Ok(Tensor {
            dims,
            data: self.data,
        })
    }

    pub fn cast<T: Element>(&self) -> Tensor<T> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.to_f64())).collect(),
        }
    }

    /// Element-wise map evaluated in `f64`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        let acc = self.data.iter().map(|v| f(v.to_f64())).collect();
        Self::from_acc(self.dims.clone(), acc, "map output")
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Result<Self> {
        self.map(|v| v * c)
    }

    fn zip(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        same_dims(self, other)?;
        let acc = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| f(a.to_f64(), b.to_f64()))
            .collect();
        Self::from_acc(self.dims.clone(), acc, "element-wise output")
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64()).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .map(|v| v.to_f64().abs())
            .fold(0.0, f64::max)
    }

    /// Extents of a rank-3 `[C, H, W]` tensor.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.dims[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::shape(format!(
                "expected a [C,H,W] tensor, got {:?}",
                self.dims
            ))),
        }
    }

    /// One `[H, W]` plane of a `[C, H, W]` tensor.
    pub fn plane(&self, c: usize) -> &[S] {
        let (_, h, w) = self.chw().expect("plane() requires rank 3");
        &self.data[c * h * w..(c + 1) * h * w]
    }
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.is_empty() || dims.len() > 4 {
        return Err(Error::shape(format!(
            "rank must be 1..=4, got {}",
            dims.len()
        )));
    }
    if dims.contains(&0) {
        return Err(Error::shape(format!("zero extent in {dims:?}")));
    }
    Ok(())
}

fn same_dims<S, T>(a: &Tensor<S>, b: &Tensor<T>) -> Result<()> {
    if a.dims != b.dims {
        return Err(Error::shape(format!("{:?} vs {:?}", a.dims, b.dims)));
    }
    Ok(())
}

/// Gradients produced by a layer's backward pass.
#[derive(Debug, Clone)]
pub struct LayerGrad<S = f32> {
    pub input_grad: Tensor<S>,
    pub param_grads: BTreeMap<String, Tensor<S>>,
}

impl<S: Element> LayerGrad<S> {
    fn input_only(input_grad: Tensor<S>) -> Self {
        LayerGrad {
            input_grad,
            param_grads: BTreeMap::new(),
        }
    }
}

/// A differentiable layer with a single tensor input.
pub trait Layer<S: Element> {
    fn forward(&self, input: &Tensor<S>) -> Result<Tensor<S>>;

    /// Gradient of `<upstream, forward(input)>` with respect to the input and
    /// every parameter.
    fn backward(&self, input: &Tensor<S>, upstream: &Tensor<S>) -> Result<LayerGrad<S>>;
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding that preserves the spatial extent (1 px for 3x3 kernels).
    Same,
    /// No padding.
    Valid,
}

/// Cross-correlation with a `[C_out, C_in, k, k]` kernel, `k` in {1, 3}.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<S = f32> {
    pub kernel: Tensor<S>,
    pub bias: Tensor<S>,
    pub padding: Padding,
}

struct ConvGeom {
    c_in: usize,
    c_out: usize,
    k: usize,
    pad: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

impl<S: Element> Conv2d<S> {
    pub fn new(kernel: Tensor<S>, bias: Tensor<S>, padding: Padding) -> Result<Self> {
        let (c_out, _, k, k2) = match kernel.dims[..] {
            [a, b, c, d] => (a, b, c, d),
            _ => return Err(Error::shape("conv kernel must be [C_out,C_in,k,k]")),
        };
        if k != k2 || !(k == 1 || k == 3) {
            return Err(Error::shape(format!("kernel size must be 1 or 3, got {k}x{k2}")));
        }
        if bias.dims != [c_out] {
            return Err(Error::shape(format!(
                "bias dims {:?} do not match C_out={c_out}",
                bias.dims
            )));
        }
        Ok(Conv2d {
            kernel,
            bias,
            padding,
        })
    }

    pub fn zeros(c_out: usize, c_in: usize, k: usize, padding: Padding) -> Result<Self> {
        Self::new(
            Tensor::zeros(&[c_out, c_in, k, k])?,
            Tensor::zeros(&[c_out])?,
            padding,
        )
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.dims[1]
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.dims[0]
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.dims[2]
    }

    fn geometry(&self, input: &Tensor<S>) -> Result<ConvGeom> {
        let (c_in, h, w) = input.chw()?;
        if c_in != self.in_channels() {
            return Err(Error::shape(format!(
                "conv expects {} input channels, got {c_in}",
                self.in_channels()
            )));
        }
        let k = self.kernel_size();
        let pad = match self.padding {
            Padding::Same => k / 2,
            Padding::Valid => 0,
        };
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::shape(format!("input {h}x{w} smaller than kernel {k}")));
        }
        Ok(ConvGeom {
            c_in,
            c_out: self.out_channels(),
            k,
            pad,
            h,
            w,
            oh: h + 2 * pad - k + 1,
            ow: w + 2 * pad - k + 1,
        })
    }
}

/// Valid output range `[lo, hi)` along one axis for kernel tap `t`.
#[inline]
fn tap_range(t: usize, pad: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    // input index = o + t - pad must lie in [0, in_len)
    let lo = pad.saturating_sub(t);
    let hi = (in_len + pad).saturating_sub(t).min(out_len);
    (lo, hi.max(lo))
}

pub fn conv2d<S: Element>(input: &Tensor<S>, layer: &Conv2d<S>) -> Result<Tensor<S>> {
    let g = layer.geometry(input)?;
    let x = input.to_f64_vec();
    let kern = layer.kernel.to_f64_vec();
    let plane = g.oh * g.ow;
    let mut out = vec![0.0f64; g.c_out * plane];
    for co in 0..g.c_out {
        let acc = &mut out[co * plane..(co + 1) * plane];
        acc.fill(layer.bias.data[co].to_f64());
        for ci in 0..g.c_in {
            let src = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.k {
                let (y_lo, y_hi) = tap_range(ky, g.pad, g.h, g.oh);
                for kx in 0..g.k {
                    let wgt = kern[((co * g.c_in + ci) * g.k + ky) * g.k + kx];
                    if wgt == 0.0 {
                        continue;
                    }
                    let (x_lo, x_hi) = tap_range(kx, g.pad, g.w, g.ow);
                    for oy in y_lo..y_hi {
                        let iy = oy + ky - g.pad;
                        let dst = &mut acc[oy * g.ow + x_lo..oy * g.ow + x_hi];
                        let s = &src[iy * g.w + x_lo + kx - g.pad..iy * g.w + x_hi + kx - g.pad];
                        for (d, v) in dst.iter_mut().zip(s) {
                            *d += wgt * v;
                        }
                    }
                }
            }
        }
    }
    Tensor::from_acc(vec![g.c_out, g.oh, g.ow], out, "conv2d output")
}

pub fn conv2d_backward<S: Element>(
    input: &Tensor<S>,
    layer: &Conv2d<S>,
    upstream: &Tensor<S>,
) -> Result<LayerGrad<S>> {
    let g = layer.geometry(input)?;
    if upstream.dims != [g.c_out, g.oh, g.ow] {
        return Err(Error::shape(format!(
            "upstream {:?} does not match conv output [{}, {}, {}]",
            upstream.dims, g.c_out, g.oh, g.ow
        )));
    }
    let x = input.to_f64_vec();
    let kern = layer.kernel.to_f64_vec();
    let up = upstream.to_f64_vec();
    let plane = g.oh * g.ow;
    let mut dx = vec![0.0f64; x.len()];
    let mut dk = vec![0.0f64; kern.len()];
    let mut db = vec![0.0f64; g.c_out];
    for co in 0..g.c_out {
        let u = &up[co * plane..(co + 1) * plane];
        db[co] = u.iter().sum();
        for ci in 0..g.c_in {
            let base = ci * g.h * g.w;
            for ky in 0..g.k {
                let (y_lo, y_hi) = tap_range(ky, g.pad, g.h, g.oh);
                for kx in 0..g.k {
                    let (x_lo, x_hi) = tap_range(kx, g.pad, g.w, g.ow);
                    let kidx = ((co * g.c_in + ci) * g.k + ky) * g.k + kx;
                    let wgt = kern[kidx];
                    let mut gk = 0.0;
                    for oy in y_lo..y_hi {
                        let iy = oy + ky - g.pad;
                        let urow = &u[oy * g.ow + x_lo..oy * g.ow + x_hi];
                        let off = base + iy * g.w + x_lo + kx - g.pad;
                        let xrow = &x[off..off + urow.len()];
                        for (uv, xv) in urow.iter().zip(xrow) {
                            gk += uv * xv;
                        }
                        if wgt != 0.0 {
                            for (d, uv) in dx[off..off + urow.len()].iter_mut().zip(urow) {
                                *d += wgt * uv;
                            }
                        }
                    }
                    dk[kidx] += gk;
                }
            }
        }
    }
    let mut param_grads = BTreeMap::new();
    param_grads.insert(
        "kernel".to_string(),
        Tensor::from_acc(layer.kernel.dims.clone(), dk, "kernel gradient")?,
    );
    param_grads.insert(
        "bias".to_string(),
        Tensor::from_acc(vec![g.c_out], db, "bias gradient")?,
    );
    Ok(LayerGrad {
        input_grad: Tensor::from_acc(input.dims.clone(), dx, "input gradient")?,
        param_grads,
    })
}

impl<S: Element> Layer<S> for Conv2d<S> {
    fn forward(&self, input: &Tensor<S>) -> Result<Tensor<S>> {
        conv2d(input, self)
    }

    fn backward(&self, input: &Tensor<S>, upstream: &Tensor<S>) -> Result<LayerGrad<S>> {
        conv2d_backward(input, self, upstream)
    }
}

// ---------------------------------------------------------------------------
// Bilinear resampling (align_corners = false)
// ---------------------------------------------------------------------------

/// Interpolation taps along one axis: `(i0, i1, frac)` for each output index.
fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let frac = if i0 == i1 { 0.0 } else { src - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

/// Bilinear resampling of every channel to `target`, upsampling or
/// downsampling. [`bilinear_upsample`] is the contract-checked entry point.
pub fn bilinear_resize<S: Element>(input: &Tensor<S>, target: (usize, usize)) -> Result<Tensor<S>> {
    let (c, h, w) = input.chw()?;
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::shape("resize target must be non-empty"));
    }
    if (th, tw) == (h, w) {
        return Ok(input.clone());
    }
    let ty = bilinear_taps(h, th);
    let tx = bilinear_taps(w, tw);
    let x = input.to_f64_vec();
    let mut out = vec![0.0f64; c * th * tw];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * th * tw..(ch + 1) * th * tw];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                dst[oy * tw + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Tensor::from_acc(vec![c, th, tw], out, "resize output")
}

/// Adjoint of [`bilinear_resize`]: scatters `upstream` back onto the source grid.
pub fn bilinear_resize_backward<S: Element>(
    source_dims: (usize, usize, usize),
    upstream: &Tensor<S>,
) -> Result<Tensor<S>> {
    let (c, h, w) = source_dims;
    let (uc, th, tw) = upstream.chw()?;
    if uc != c {
        return Err(Error::shape("resize backward channel mismatch"));
    }
    if (th, tw) == (h, w) {
        return Ok(upstream.clone());
    }
    let ty = bilinear_taps(h, th);
    let tx = bilinear_taps(w, tw);
    let up = upstream.to_f64_vec();
    let mut dx = vec![0.0f64; c * h * w];
    for ch in 0..c {
        let u = &up[ch * th * tw..(ch + 1) * th * tw];
        let d = &mut dx[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let g = u[oy * tw + ox];
                d[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                d[y0 * w + x1] += g * (1.0 - fy) * fx;
                d[y1 * w + x0] += g * fy * (1.0 - fx);
                d[y1 * w + x1] += g * fy * fx;
            }
        }
    }
    Tensor::from_acc(vec![c, h, w], dx, "resize gradient")
}

pub fn bilinear_upsample<S: Element>(input: &Tensor<S>, target: (usize, usize)) -> Result<Tensor<S>> {
    let (_, h, w) = input.chw()?;
    if target.0 < h || target.1 < w {
        return Err(Error::shape(format!(
            "upsample target {target:?} smaller than source ({h}, {w})"
        )));
    }
    bilinear_resize(input, target)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BilinearUpsample {
    pub target: (usize, usize),
}

impl<S: Element> Layer<S> for BilinearUpsample {
    fn forward(&self, input: &Tensor<S>) -> Result<Tensor<S>> {
        bilinear_upsample(input, self.target)
    }

    fn backward(&self, input: &Tensor<S>, upstream: &Tensor<S>) -> Result<LayerGrad<S>> {
        let dims = input.chw()?;
        if upstream.dims != [dims.0, self.target.0, self.target.1] {
            return Err(Error::shape("upstream does not match upsample output"));
        }
        Ok(LayerGrad::input_only(bilinear_resize_backward(dims, upstream)?))
    }
}

// ---------------------------------------------------------------------------
// Pooling, softmax, relu, mse
// ---------------------------------------------------------------------------

/// Per-channel spatial mean of a `[C, H, W]` tensor, as a rank-1 `[C]` tensor.
pub fn global_avg_pool<S: Element>(input: &Tensor<S>) -> Result<Tensor<S>> {
    let (c, h, w) = input.chw()?;
    let n = (h * w) as f64;
    let acc = (0..c)
        .map(|ch| input.plane(ch).iter().map(|v| v.to_f64()).sum::<f64>() / n)
        .collect();
    Tensor::from_acc(vec![c], acc, "pool output")
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GlobalAvgPool;

impl<S: Element> Layer<S> for GlobalAvgPool {
    fn forward(&self, input: &Tensor<S>) -> Result<Tensor<S>> {
        global_avg_pool(input)
    }

    fn backward(&self, input: &Tensor<S>, upstream: &Tensor<S>) -> Result<LayerGrad<S>> {
        let (c, h, w) = input.chw()?;
        if upstream.dims != [c] {
            return Err(Error::shape("upstream does not match pool output"));
        }
        let n = (h * w) as f64;
        let mut dx = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            let g = upstream.data[ch].to_f64() / n;
            dx.extend(std::iter::repeat_n(g, h * w));
        }
        Ok(LayerGrad::input_only(Tensor::from_acc(
            input.dims.clone(),
            dx,
            "pool gradient",
        )?))
    }
}

/// Numerically stable softmax over a rank-1 tensor.
pub fn softmax<S: Element>(logits: &Tensor<S>) -> Result<Tensor<S>> {
    let p = softmax_f64(&logits.to_f64_vec())?;
    Tensor::from_acc(logits.dims.clone(), p, "softmax output")
}

pub(crate) fn softmax_f64(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax logits"));
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / z).collect())
}

/// Vector-Jacobian product of softmax: `p ⊙ (g − <g, p>)`.
pub(crate) fn softmax_vjp(p: &[f64], upstream: &[f64]) -> Vec<f64> {
    let dot: f64 = p.iter().zip(upstream).map(|(a, b)| a * b).sum();
    p.iter().zip(upstream).map(|(pi, gi)| pi * (gi - dot)).collect()
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Softmax;

impl<S: Element> Layer<S> for Softmax {
    fn forward(&self, input: &Tensor<S>) -> Result<Tensor<S>> {
        softmax(input)
    }

    fn backward(&self, input: &Tensor<S>, upstream: &Tensor<S>) -> Result<LayerGrad<S>> {
        same_dims(input, upstream)?;
        let p = softmax_f64(&input.to_f64_vec())?;
        let g = softmax_vjp(&p, &upstream.to_f64_vec());
        Ok(LayerGrad::input_only(Tensor::from_acc(
            input.dims.clone(),
            g,
            "softmax gradient",
        )?))
    }
}

pub fn relu<S: Element>(input: &Tensor<S>) -> Tensor<S> {
    Tensor {
        dims: input.dims.clone(),
        data: input
            .data
            .iter()
            .map(|&v| if v.to_f64() > 0.0 { v } else { S::from_f64(0.0) })
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Relu;

impl<S: Element> Layer<S> for Relu {
    fn forward(&self, input: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(relu(input))
    }

    fn backward(&self, input: &Tensor<S>, upstream: &Tensor<S>) -> Result<LayerGrad<S>> {
        Ok(LayerGrad::input_only(relu_backward(input, upstream)?))
    }
}

/// Masks `upstream` where the forward input was non-positive.
pub fn relu_backward<S: Element>(input: &Tensor<S>, upstream: &Tensor<S>) -> Result<Tensor<S>> {
    same_dims(input, upstream)?;
    Ok(Tensor {
        dims: input.dims.clone(),
        data: input
            .data
            .iter()
            .zip(&upstream.data)
            .map(|(&x, &g)| if x.to_f64() > 0.0 { g } else { S::from_f64(0.0) })
            .collect(),
    })
}

/// Mean of squared element-wise differences.
pub fn mse<S: Element>(pred: &Tensor<S>, target: &Tensor<S>) -> Result<f64> {
    same_dims(pred, target)?;
    let s: f64 = pred
        .data
        .iter()
        .zip(&target.data)
        .map(|(p, t)| {
            let d = p.to_f64() - t.to_f64();
            d * d
        })
        .sum();
    Ok(s / pred.len() as f64)
}

/// Gradient of `upstream * mse(pred, target)` with respect to `pred`.
pub fn mse_backward<S: Element>(pred: &Tensor<S>, target: &Tensor<S>, upstream: f64) -> Result<Tensor<S>> {
    same_dims(pred, target)?;
    let c = 2.0 * upstream / pred.len() as f64;
    let acc = pred
        .data
        .iter()
        .zip(&target.data)
        .map(|(p, t)| c * (p.to_f64() - t.to_f64()))
        .collect();
    Tensor::from_acc(pred.dims.clone(), acc, "mse gradient")
}
