//! Per-finger heatmap supervision and the hyperfeature decoder.
//!
//! Labels are isotropic Gaussians around annotated fingertips. Synthetic
//! multi-timestep, multi-level activations stand in for a frozen diffusion
//! U-Net; a softmax-mixed bottleneck aggregator and a three-level top-down
//! pyramid decoder map them back to `K` per-finger heatmaps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorkit::{
    bilinear_resize, bilinear_resize_backward, conv2d, conv2d_backward, global_avg_pool, mse,
    mse_backward, relu, relu_backward, softmax_f64, softmax_vjp, Conv2d, Element, Padding, Tensor,
};

pub const FINGER_COUNT: usize = 5;
pub const FINGER_NAMES: [&str; FINGER_COUNT] = ["thumb", "index", "middle", "ring", "little"];
/// Smallest lattice extent accepted for label synthesis.
pub const MIN_LABEL_EXTENT: usize = 64;

// ---------------------------------------------------------------------------
// Labels
// ---------------------------------------------------------------------------

/// A fingertip centre in lattice coordinates (sub-pixel).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FingerAnnotation {
    pub id: usize,
    pub row: f64,
    pub col: f64,
}

/// `K` per-finger likelihood maps over an `h x w` lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapStack {
    channels: Tensor<f32>,
}

impl HeatmapStack {
    pub fn new(channels: Tensor<f32>) -> Result<Self> {
        channels.chw()?;
        Ok(HeatmapStack { channels })
    }

    pub fn fingers(&self) -> usize {
        self.channels.dims()[0]
    }

    pub fn height(&self) -> usize {
        self.channels.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.channels.dims()[2]
    }

    pub fn channel(&self, k: usize) -> &[f32] {
        self.channels.plane(k)
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.channels
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.channels
    }
}

/// Gaussian width for an `h x w` lattice.
pub fn label_sigma(h: usize, w: usize) -> f64 {
    h.min(w) as f64 / 64.0
}

pub fn synthesize_labels(annotations: &[FingerAnnotation], h: usize, w: usize) -> Result<HeatmapStack> {
    if h < MIN_LABEL_EXTENT || w < MIN_LABEL_EXTENT {
        return Err(Error::invalid(format!(
            "label lattice {h}x{w} is below the {MIN_LABEL_EXTENT}px minimum"
        )));
    }
    if annotations.len() > FINGER_COUNT {
        return Err(Error::invalid("more annotations than fingers"));
    }
    let mut seen = [false; FINGER_COUNT];
    for a in annotations {
        if a.id >= FINGER_COUNT {
            return Err(Error::invalid(format!("finger id {} out of range", a.id)));
        }
        if std::mem::replace(&mut seen[a.id], true) {
            return Err(Error::invalid(format!("duplicate finger id {}", a.id)));
        }
        let inside = (0.0..=(h - 1) as f64).contains(&a.row) && (0.0..=(w - 1) as f64).contains(&a.col);
        if !inside {
            return Err(Error::invalid(format!(
                "finger {} centre ({}, {}) outside the {h}x{w} lattice",
                a.id, a.row, a.col
            )));
        }
    }
    let sigma = label_sigma(h, w);
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut data = vec![0.0f32; FINGER_COUNT * h * w];
    for a in annotations {
        let plane = &mut data[a.id * h * w..(a.id + 1) * h * w];
        for r in 0..h {
            let dr = r as f64 - a.row;
            for c in 0..w {
                let dc = c as f64 - a.col;
                plane[r * w + c] = (-(dr * dr + dc * dc) * inv).exp() as f32;
            }
        }
    }
    HeatmapStack::new(Tensor::new(vec![FINGER_COUNT, h, w], data)?)
}

// ---------------------------------------------------------------------------
// Forward noising
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced betas over `steps` timesteps.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 || !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(Error::invalid("schedule needs T>=2 and 0<beta_start<beta_end<1"));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect();
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(NoiseSchedule { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// Cumulative product of `1 - beta` up to timestep `t` (1-based).
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.steps() {
            return Err(Error::invalid(format!(
                "timestep {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(self.alpha_bars[t - 1])
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule::linear(1000, 1e-4, 0.02).expect("valid default schedule")
    }
}

/// `sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps`.
pub fn forward_noise<S: Element>(
    z0: &Tensor<S>,
    t: usize,
    eps: &Tensor<S>,
    schedule: &NoiseSchedule,
) -> Result<Tensor<S>> {
    let ab = schedule.alpha_bar(t)?;
    if z0.dims() != eps.dims() {
        return Err(Error::shape("noise and latent dims differ"));
    }
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let acc: Vec<f64> = z0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(z, e)| a * z.to_f64() + b * e.to_f64())
        .collect();
    Tensor::from_f64_vec(z0.dims().to_vec(), acc)
}

// ---------------------------------------------------------------------------
// Synthetic activations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeSpec {
    /// `(C, H, W)` per level.
    pub levels: Vec<[usize; 3]>,
    /// Selected diffusion timesteps (1-based).
    pub timesteps: Vec<usize>,
    #[serde(default)]
    pub noise_amplitude: f64,
    /// Seed of the fixed per-level embeddings, shared by every sample.
    #[serde(default = "default_embed_seed")]
    pub embed_seed: u64,
    #[serde(default = "default_cond_dim")]
    pub cond_dim: usize,
}

fn default_embed_seed() -> u64 {
    0x5EED_F5A6
}

fn default_cond_dim() -> usize {
    8
}

pub const DEFAULT_TIMESTEPS: [usize; 3] = [1, 201, 401];

impl ShapeSpec {
    /// Two levels: `C=6` at label resolution and `C=10` at half resolution.
    pub fn for_labels(h: usize, w: usize) -> Self {
        ShapeSpec {
            levels: vec![[6, h, w], [10, h.div_ceil(2), w.div_ceil(2)]],
            timesteps: DEFAULT_TIMESTEPS.to_vec(),
            noise_amplitude: 0.05,
            embed_seed: default_embed_seed(),
            cond_dim: default_cond_dim(),
        }
    }

    fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.levels.is_empty() || self.timesteps.is_empty() {
            return Err(Error::invalid("activation spec needs at least one level and one timestep"));
        }
        if self.levels.iter().any(|l| l.contains(&0)) {
            return Err(Error::invalid("activation level with a zero extent"));
        }
        for &t in &self.timesteps {
            schedule.alpha_bar(t)?;
        }
        if !self.noise_amplitude.is_finite() || self.noise_amplitude < 0.0 {
            return Err(Error::invalid("noise amplitude must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Activations indexed `[timestep][level]`, each `[C_l, H_l, W_l]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationSet<S = f32> {
    pub timesteps: Vec<usize>,
    pub levels: Vec<Vec<Tensor<S>>>,
    pub conditioning: Vec<f32>,
}

impl<S: Element> ActivationSet<S> {
    pub fn level_count(&self) -> usize {
        self.levels.first().map_or(0, Vec::len)
    }

    pub fn cast<T: Element>(&self) -> ActivationSet<T> {
        ActivationSet {
            timesteps: self.timesteps.clone(),
            levels: self
                .levels
                .iter()
                .map(|ls| ls.iter().map(Tensor::cast).collect())
                .collect(),
            conditioning: self.conditioning.clone(),
        }
    }

    /// Shapes must agree across timesteps for the same level.
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() || self.level_count() == 0 {
            return Err(Error::invalid("empty activation set"));
        }
        if self.levels.len() != self.timesteps.len() {
            return Err(Error::shape("one level list per timestep required"));
        }
        for ls in &self.levels {
            if ls.len() != self.level_count() {
                return Err(Error::shape("level count differs across timesteps"));
            }
            for (l, t) in ls.iter().enumerate() {
                t.chw()?;
                if t.dims() != self.levels[0][l].dims() {
                    return Err(Error::shape(format!("level {l} shape differs across timesteps")));
                }
            }
        }
        Ok(())
    }
}

/// Block-average downsampling when the factor is integral, bilinear otherwise.
fn area_resize(input: &Tensor<f64>, target: (usize, usize)) -> Result<Tensor<f64>> {
    let (c, h, w) = input.chw()?;
    let (th, tw) = target;
    if th > h || tw > w || h % th != 0 || w % tw != 0 {
        return bilinear_resize(input, target);
    }
    let (fy, fx) = (h / th, w / tw);
    let norm = 1.0 / (fy * fx) as f64;
    let x = input.data();
    let mut out = vec![0.0; c * th * tw];
    for ch in 0..c {
        for r in 0..h {
            for col in 0..w {
                out[(ch * th + r / fy) * tw + col / fx] += x[(ch * h + r) * w + col] * norm;
            }
        }
    }
    Tensor::new(vec![c, th, tw], out)
}

fn level_embedding(spec: &ShapeSpec, level: usize, c_out: usize, k: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.embed_seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(level as u64 + 1)));
    let scale = 1.0 / (k as f64).sqrt();
    (0..c_out * k)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
        .collect()
}

/// Deterministic stand-in for frozen U-Net activations.
///
/// Each level is a fixed random linear embedding of the (block-averaged)
/// target heatmaps, pushed through the forward-noising process with noise
/// scaled by `noise_amplitude`.
pub fn generate_synthetic_activations(
    target: &HeatmapStack,
    seed: u64,
    spec: &ShapeSpec,
    schedule: &NoiseSchedule,
) -> Result<ActivationSet> {
    spec.validate(schedule)?;
    let k = target.fingers();
    let target64: Tensor<f64> = target.tensor().cast();
    let mut clean = Vec::with_capacity(spec.levels.len());
    for (l, &[c, h, w]) in spec.levels.iter().enumerate() {
        let down = area_resize(&target64, (h, w))?;
        let emb = level_embedding(spec, l, c, k);
        let mut out = vec![0.0; c * h * w];
        for co in 0..c {
            let dst = &mut out[co * h * w..(co + 1) * h * w];
            for ki in 0..k {
                let e = emb[co * k + ki];
                for (d, v) in dst.iter_mut().zip(down.plane(ki)) {
                    *d += e * v;
                }
            }
        }
        clean.push(Tensor::<f64>::new(vec![c, h, w], out)?);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut levels = Vec::with_capacity(spec.timesteps.len());
    for &t in &spec.timesteps {
        let mut per_level = Vec::with_capacity(clean.len());
        for z0 in &clean {
            let eps: Vec<f64> = (0..z0.len())
                .map(|_| spec.noise_amplitude * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let eps = Tensor::new(z0.dims().to_vec(), eps)?;
            per_level.push(forward_noise(z0, t, &eps, schedule)?.cast::<f32>());
        }
        levels.push(per_level);
    }
    let mut crng = ChaCha8Rng::seed_from_u64(spec.embed_seed.rotate_left(17));
    let conditioning = (0..spec.cond_dim)
        .map(|_| crng.sample::<f64, _>(StandardNormal) as f32)
        .collect();
    Ok(ActivationSet {
        timesteps: spec.timesteps.clone(),
        levels,
        conditioning,
    })
}

// ---------------------------------------------------------------------------
// Network parameters
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    /// Input channels per activation level.
    pub level_channels: Vec<usize>,
    pub timesteps: usize,
    /// Channels of the aggregated descriptor.
    pub descriptor_channels: usize,
    /// Pyramid widths for r = 3, 2, 1.
    pub widths: [usize; 3],
    pub fingers: usize,
    /// Spatial size of the aggregated descriptor.
    pub descriptor_size: (usize, usize),
    pub output_size: (usize, usize),
}

impl NetConfig {
    /// Pyramid widths `{256, 128, 64}` scaled by `width_factor`.
    pub fn scaled_widths(width_factor: f64) -> [usize; 3] {
        [256.0, 128.0, 64.0].map(|c: f64| ((c * width_factor).round() as usize).max(1))
    }

    /// Target sizes `s_3, s_2, s_1`.
    pub fn target_sizes(&self) -> Result<[(usize, usize); 3]> {
        let (h, w) = self.descriptor_size;
        let s3 = (h, w);
        let s2 = (2 * h, 2 * w);
        let s1 = self.output_size;
        if h == 0 || w == 0 || s1.0 < s2.0 || s1.1 < s2.1 {
            return Err(Error::shape(format!(
                "inconsistent decoder size chain {s3:?} -> {s2:?} -> {s1:?}"
            )));
        }
        Ok([s3, s2, s1])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregatorParams<S = f32> {
    /// One 1x1 bottleneck per level, shared across timesteps.
    pub bottlenecks: Vec<Conv2d<S>>,
    /// Mixing logits, `[L, S]`.
    pub logits: Tensor<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams<S = f32> {
    /// Lateral 1x1 projections for r = 3, 2, 1.
    pub lateral: [Conv2d<S>; 3],
    /// 1x1 adapters into r = 2 and r = 1.
    pub adapters: [Conv2d<S>; 2],
    /// 3x3 smoothing convolutions (followed by ReLU) for r = 3, 2, 1.
    pub smooth: [Conv2d<S>; 3],
    /// Final 3x3 projection to `K` heatmaps.
    pub head: Conv2d<S>,
    pub sizes: [(usize, usize); 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffordanceNet<S = f32> {
    pub config: NetConfig,
    pub aggregator: AggregatorParams<S>,
    pub decoder: DecoderParams<S>,
}

fn init_conv<S: Element>(rng: &mut ChaCha8Rng, c_out: usize, c_in: usize, k: usize) -> Result<Conv2d<S>> {
    let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
    let kernel = (0..c_out * c_in * k * k)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    let bias = (0..c_out).map(|_| rng.random_range(-bound..bound)).collect();
    Conv2d::new(
        Tensor::from_f64_vec(vec![c_out, c_in, k, k], kernel)?,
        Tensor::from_f64_vec(vec![c_out], bias)?,
        Padding::Same,
    )
}

impl<S: Element> AffordanceNet<S> {
    /// Uniform `±1/sqrt(fan_in)` initialisation; mixing logits start at zero.
    pub fn init(config: NetConfig, seed: u64) -> Result<Self> {
        let sizes = config.target_sizes()?;
        if config.level_channels.is_empty() || config.timesteps == 0 || config.fingers == 0 {
            return Err(Error::invalid("network needs levels, timesteps and fingers"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cg = config.descriptor_channels;
        let [c3, c2, c1] = config.widths;
        let bottlenecks = config
            .level_channels
            .iter()
            .map(|&c| init_conv(&mut rng, cg, c, 1))
            .collect::<Result<Vec<_>>>()?;
        let logits = Tensor::zeros(&[config.level_channels.len(), config.timesteps])?;
        let decoder = DecoderParams {
            lateral: [
                init_conv(&mut rng, c3, cg, 1)?,
                init_conv(&mut rng, c2, cg, 1)?,
                init_conv(&mut rng, c1, cg, 1)?,
            ],
            adapters: [init_conv(&mut rng, c2, c3, 1)?, init_conv(&mut rng, c1, c2, 1)?],
            smooth: [
                init_conv(&mut rng, c3, c3, 3)?,
                init_conv(&mut rng, c2, c2, 3)?,
                init_conv(&mut rng, c1, c1, 3)?,
            ],
            head: init_conv(&mut rng, config.fingers, c1, 3)?,
            sizes,
        };
        Ok(AffordanceNet {
            config,
            aggregator: AggregatorParams { bottlenecks, logits },
            decoder,
        })
    }

    /// Same architecture with every parameter zeroed.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_param_mut(|t| t.data_mut().fill(S::from_f64(0.0)));
        z
    }

    fn convs(&self) -> impl Iterator<Item = &Conv2d<S>> {
        let d = &self.decoder;
        self.aggregator
            .bottlenecks
            .iter()
            .chain(d.lateral.iter())
            .chain(d.adapters.iter())
            .chain(d.smooth.iter())
            .chain(std::iter::once(&d.head))
    }

    /// Visits every parameter tensor in a fixed order.
    pub fn for_each_param(&self, mut f: impl FnMut(&Tensor<S>)) {
        f(&self.aggregator.logits);
        for c in self.convs() {
            f(&c.kernel);
            f(&c.bias);
        }
    }

    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&mut Tensor<S>)) {
        f(&mut self.aggregator.logits);
        let d = &mut self.decoder;
        let convs = self
            .aggregator
            .bottlenecks
            .iter_mut()
            .chain(d.lateral.iter_mut())
            .chain(d.adapters.iter_mut())
            .chain(d.smooth.iter_mut())
            .chain(std::iter::once(&mut d.head));
        for c in convs {
            f(&mut c.kernel);
            f(&mut c.bias);
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_param(|t| n += t.len());
        n
    }

    pub fn cast<T: Element>(&self) -> AffordanceNet<T> {
        let conv = |c: &Conv2d<S>| Conv2d {
            kernel: c.kernel.cast(),
            bias: c.bias.cast(),
            padding: c.padding,
        };
        let d = &self.decoder;
        AffordanceNet {
            config: self.config.clone(),
            aggregator: AggregatorParams {
                bottlenecks: self.aggregator.bottlenecks.iter().map(conv).collect(),
                logits: self.aggregator.logits.cast(),
            },
            decoder: DecoderParams {
                lateral: [conv(&d.lateral[0]), conv(&d.lateral[1]), conv(&d.lateral[2])],
                adapters: [conv(&d.adapters[0]), conv(&d.adapters[1])],
                smooth: [conv(&d.smooth[0]), conv(&d.smooth[1]), conv(&d.smooth[2])],
                head: conv(&d.head),
                sizes: d.sizes,
            },
        }
    }

    /// Mixing weights after the joint softmax, row-major `[L, S]`.
    pub fn mixing_weights(&self) -> Result<Vec<f64>> {
        softmax_f64(&self.aggregator.logits.to_f64_vec())
    }
}

// ---------------------------------------------------------------------------
// Aggregation
// ---------------------------------------------------------------------------

/// Aggregated descriptor: the dense map consumed by the decoder plus its
/// globally pooled summary vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor<S = f32> {
    pub dense: Tensor<S>,
    pub pooled: Tensor<S>,
}

pub struct AggregateCache<S> {
    resized: Vec<Vec<Tensor<S>>>,
    branches: Vec<Vec<Tensor<S>>>,
    weights: Vec<f64>,
}

/// Common grid: the smallest level extent along each axis.
pub fn descriptor_grid<S: Element>(acts: &ActivationSet<S>) -> Result<(usize, usize)> {
    acts.validate()?;
    let dims = acts.levels[0].iter().map(|t| (t.dims()[1], t.dims()[2]));
    let h = dims.clone().map(|d| d.0).min().unwrap_or(0);
    let w = dims.map(|d| d.1).min().unwrap_or(0);
    Ok((h, w))
}

pub fn aggregate_with_cache<S: Element>(
    acts: &ActivationSet<S>,
    params: &AggregatorParams<S>,
) -> Result<(Descriptor<S>, AggregateCache<S>)> {
    let grid = descriptor_grid(acts)?;
    let n_levels = acts.level_count();
    let n_steps = acts.timesteps.len();
    if params.bottlenecks.len() != n_levels || params.logits.dims() != [n_levels, n_steps] {
        return Err(Error::shape(format!(
            "aggregator expects {} levels x {:?} logits, activations have {n_levels} x {n_steps}",
            params.bottlenecks.len(),
            params.logits.dims()
        )));
    }
    let weights = softmax_f64(&params.logits.to_f64_vec())?;
    let cg = params.bottlenecks[0].out_channels();
    let mut acc = vec![0.0f64; cg * grid.0 * grid.1];
    let mut resized = Vec::with_capacity(n_steps);
    let mut branches = Vec::with_capacity(n_steps);
    for (s, per_level) in acts.levels.iter().enumerate() {
        let mut rs = Vec::with_capacity(n_levels);
        let mut bs = Vec::with_capacity(n_levels);
        for (l, a) in per_level.iter().enumerate() {
            // 1x1 convolution and bilinear resampling commute, so resample first.
            let r = bilinear_resize(a, grid)?;
            let b = conv2d(&r, &params.bottlenecks[l])?;
            let wgt = weights[l * n_steps + s];
            for (d, v) in acc.iter_mut().zip(b.data()) {
                *d += wgt * v.to_f64();
            }
            rs.push(r);
            bs.push(b);
        }
        resized.push(rs);
        branches.push(bs);
    }
    let dense = Tensor::from_f64_vec(vec![cg, grid.0, grid.1], acc)?;
    let pooled = global_avg_pool(&dense)?;
    Ok((
        Descriptor { dense, pooled },
        AggregateCache {
            resized,
            branches,
            weights,
        },
    ))
}

pub fn aggregate<S: Element>(acts: &ActivationSet<S>, params: &AggregatorParams<S>) -> Result<Descriptor<S>> {
    aggregate_with_cache(acts, params).map(|(d, _)| d)
}

fn aggregate_backward<S: Element>(
    params: &AggregatorParams<S>,
    cache: &AggregateCache<S>,
    d_dense: &Tensor<S>,
    grads: &mut AggregatorParams<S>,
) -> Result<()> {
    let n_steps = cache.resized.len();
    let n_levels = params.bottlenecks.len();
    let up = d_dense.to_f64_vec();
    let mut d_w = vec![0.0; n_levels * n_steps];
    for s in 0..n_steps {
        for l in 0..n_levels {
            let idx = l * n_steps + s;
            let b = &cache.branches[s][l];
            d_w[idx] = b.data().iter().zip(&up).map(|(x, g)| x.to_f64() * g).sum();
            let d_branch = d_dense.scale(cache.weights[idx])?;
            let g = conv2d_backward(&cache.resized[s][l], &params.bottlenecks[l], &d_branch)?;
            accumulate(&mut grads.bottlenecks[l].kernel, &g.param_grads["kernel"]);
            accumulate(&mut grads.bottlenecks[l].bias, &g.param_grads["bias"]);
        }
    }
    let d_logits = softmax_vjp(&cache.weights, &d_w);
    for (d, g) in grads.aggregator_logits_mut().iter_mut().zip(d_logits) {
        *d = S::from_f64(d.to_f64() + g);
    }
    Ok(())
}

impl<S: Element> AggregatorParams<S> {
    fn aggregator_logits_mut(&mut self) -> &mut [S] {
        self.logits.data_mut()
    }
}

fn accumulate<S: Element>(dst: &mut Tensor<S>, src: &Tensor<S>) {
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d = S::from_f64(d.to_f64() + s.to_f64());
    }
}

// ---------------------------------------------------------------------------
// Pyramid decoder
// ---------------------------------------------------------------------------

pub struct DecodeCache<S> {
    lateral_dims: [(usize, usize, usize); 3],
    adapted_dims: [(usize, usize, usize); 2],
    pre: Vec<Tensor<S>>,
    z: Vec<Tensor<S>>,
    f: Vec<Tensor<S>>,
}

impl<S: Element> DecoderParams<S> {
    pub fn forward_with_cache(&self, ag: &Tensor<S>) -> Result<(Tensor<S>, DecodeCache<S>)> {
        let (cg, _, _) = ag.chw()?;
        if cg != self.lateral[0].in_channels() {
            return Err(Error::shape(format!(
                "decoder expects {} descriptor channels, got {cg}",
                self.lateral[0].in_channels()
            )));
        }
        let mut lateral_dims = [(0, 0, 0); 3];
        let mut adapted_dims = [(0, 0, 0); 2];
        let mut pre = Vec::with_capacity(3);
        let mut z = Vec::with_capacity(3);
        let mut f: Vec<Tensor<S>> = Vec::with_capacity(3);
        for i in 0..3 {
            let size = self.sizes[i];
            let lat = conv2d(ag, &self.lateral[i])?;
            lateral_dims[i] = lat.chw()?;
            let mut p = bilinear_resize(&lat, size)?;
            if i > 0 {
                let a = conv2d(&f[i - 1], &self.adapters[i - 1])?;
                adapted_dims[i - 1] = a.chw()?;
                p = p.add(&bilinear_resize(&a, size)?)?;
            }
            let zi = conv2d(&p, &self.smooth[i])?;
            f.push(relu(&zi));
            pre.push(p);
            z.push(zi);
        }
        let out = conv2d(&f[2], &self.head)?;
        Ok((
            out,
            DecodeCache {
                lateral_dims,
                adapted_dims,
                pre,
                z,
                f,
            },
        ))
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to the descriptor.
    pub fn backward(
        &self,
        ag: &Tensor<S>,
        cache: &DecodeCache<S>,
        d_out: &Tensor<S>,
        grads: &mut DecoderParams<S>,
    ) -> Result<Tensor<S>> {
        let g = conv2d_backward(&cache.f[2], &self.head, d_out)?;
        accumulate(&mut grads.head.kernel, &g.param_grads["kernel"]);
        accumulate(&mut grads.head.bias, &g.param_grads["bias"]);
        let mut d_f = g.input_grad;
        let mut d_ag = Tensor::<S>::zeros(ag.dims())?;
        for i in (0..3).rev() {
            let d_z = relu_backward(&cache.z[i], &d_f)?;
            let g = conv2d_backward(&cache.pre[i], &self.smooth[i], &d_z)?;
            accumulate(&mut grads.smooth[i].kernel, &g.param_grads["kernel"]);
            accumulate(&mut grads.smooth[i].bias, &g.param_grads["bias"]);
            let d_pre = g.input_grad;
            let d_lat = bilinear_resize_backward(cache.lateral_dims[i], &d_pre)?;
            let g = conv2d_backward(ag, &self.lateral[i], &d_lat)?;
            accumulate(&mut grads.lateral[i].kernel, &g.param_grads["kernel"]);
            accumulate(&mut grads.lateral[i].bias, &g.param_grads["bias"]);
            accumulate(&mut d_ag, &g.input_grad);
            if i > 0 {
                let d_a = bilinear_resize_backward(cache.adapted_dims[i - 1], &d_pre)?;
                let g = conv2d_backward(&cache.f[i - 1], &self.adapters[i - 1], &d_a)?;
                accumulate(&mut grads.adapters[i - 1].kernel, &g.param_grads["kernel"]);
                accumulate(&mut grads.adapters[i - 1].bias, &g.param_grads["bias"]);
                d_f = g.input_grad;
            }
        }
        Ok(d_ag)
    }
}

pub fn decode(descriptor: &Tensor<f32>, params: &DecoderParams<f32>) -> Result<HeatmapStack> {
    let (out, _) = params.forward_with_cache(descriptor)?;
    HeatmapStack::new(out)
}

impl<S: Element> AffordanceNet<S> {
    pub fn forward(&self, acts: &ActivationSet<S>) -> Result<Tensor<S>> {
        let d = aggregate(acts, &self.aggregator)?;
        Ok(self.decoder.forward_with_cache(&d.dense)?.0)
    }

    /// MSE loss against `target` and the gradient of every parameter.
    pub fn loss_and_grad(&self, acts: &ActivationSet<S>, target: &Tensor<S>) -> Result<(f64, Self)> {
        let (desc, acache) = aggregate_with_cache(acts, &self.aggregator)?;
        let (out, dcache) = self.decoder.forward_with_cache(&desc.dense)?;
        let loss = mse(&out, target)?;
        let d_out = mse_backward(&out, target, 1.0)?;
        let mut grads = self.zeros_like();
        let d_ag = self
            .decoder
            .backward(&desc.dense, &dcache, &d_out, &mut grads.decoder)?;
        aggregate_backward(&self.aggregator, &acache, &d_ag, &mut grads.aggregator)?;
        Ok((loss, grads))
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub seed: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub width_factor: f64,
    pub descriptor_channels: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            seed: 0,
            lr: 1e-3,
            batch_size: 2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            width_factor: 1.0 / 8.0,
            descriptor_channels: 16,
        }
    }
}

/// Cosine-decayed step size: `lr` at step 0 and zero at the final step.
pub fn cosine_lr(lr: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return lr;
    }
    let frac = (step.min(total - 1)) as f64 / (total - 1) as f64;
    0.5 * lr * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: AffordanceNet<f32>,
    pub history: Vec<LossRecord>,
}

/// Network configuration implied by a dataset sample and training settings.
pub fn net_config_for(acts: &ActivationSet, target: &HeatmapStack, cfg: &TrainConfig) -> Result<NetConfig> {
    let grid = descriptor_grid(acts)?;
    Ok(NetConfig {
        level_channels: acts.levels[0].iter().map(|t| t.dims()[0]).collect(),
        timesteps: acts.timesteps.len(),
        descriptor_channels: cfg.descriptor_channels,
        widths: NetConfig::scaled_widths(cfg.width_factor),
        fingers: target.fingers(),
        descriptor_size: grid,
        output_size: (target.height(), target.width()),
    })
}

/// Mean loss of `net` over a dataset.
pub fn dataset_loss(net: &AffordanceNet<f32>, dataset: &[(ActivationSet, HeatmapStack)]) -> Result<f64> {
    let losses = dataset
        .par_iter()
        .map(|(a, h)| mse(&net.forward(a)?, h.tensor()))
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// Adam with cosine-decayed step size over mini-batches of the dataset.
pub fn train_decoder(dataset: &[(ActivationSet, HeatmapStack)], cfg: &TrainConfig) -> Result<TrainOutcome> {
    let (first_acts, first_target) = dataset
        .first()
        .ok_or_else(|| Error::invalid("training dataset is empty"))?;
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let config = net_config_for(first_acts, first_target, cfg)?;
    for (a, h) in dataset {
        if net_config_for(a, h, cfg)? != config {
            return Err(Error::shape("dataset samples disagree in shape"));
        }
    }
    let mut net = AffordanceNet::<f32>::init(config, cfg.seed)?;
    let n_params = net.param_count();
    let mut m = vec![0.0f64; n_params];
    let mut v = vec![0.0f64; n_params];
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = Vec::new();
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if order.is_empty() {
                order = (0..dataset.len()).collect();
                // Fisher-Yates with the seeded stream
                for i in (1..order.len()).rev() {
                    let j = order_rng.random_range(0..=i);
                    order.swap(i, j);
                }
            }
            batch.push(order.pop().expect("refilled above"));
        }
        let results = batch
            .par_iter()
            .map(|&i| net.loss_and_grad(&dataset[i].0, dataset[i].1.tensor()))
            .collect::<Result<Vec<_>>>()?;
        let scale = 1.0 / results.len() as f64;
        let loss = results.iter().map(|r| r.0).sum::<f64>() * scale;
        if !loss.is_finite() {
            return Err(Error::Diverged(format!("loss became {loss} at step {step}")));
        }
        let mut grad = vec![0.0f64; n_params];
        for (_, g) in &results {
            let mut off = 0;
            g.for_each_param(|t| {
                for (d, x) in grad[off..off + t.len()].iter_mut().zip(t.data()) {
                    *d += scale * x.to_f64();
                }
                off += t.len();
            });
        }
        let lr = cosine_lr(cfg.lr, step, cfg.steps);
        history.push(LossRecord { step, loss, lr });
        let t = (step + 1) as i32;
        let (bc1, bc2) = (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t));
        let mut off = 0;
        net.for_each_param_mut(|p| {
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                let i = off + j;
                let g = grad[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                let upd = (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.eps);
                let val = x.to_f64() * (1.0 - lr * cfg.weight_decay) - lr * upd;
                *x = val as f32;
            }
            off += p.len();
        });
    }
    Ok(TrainOutcome { net, history })
}

// ---------------------------------------------------------------------------
// Weights file
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedTensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

/// Serializable form of an [`AffordanceNet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetWeights {
    pub config: NetConfig,
    pub params: Vec<NamedTensor>,
}

impl NetWeights {
    pub fn from_net(net: &AffordanceNet<f32>) -> Self {
        let mut params = Vec::new();
        net.for_each_param(|t| {
            params.push(NamedTensor {
                dims: t.dims().to_vec(),
                data: t.data().to_vec(),
            })
        });
        NetWeights {
            config: net.config.clone(),
            params,
        }
    }

    pub fn into_net(self) -> Result<AffordanceNet<f32>> {
        let mut net = AffordanceNet::<f32>::init(self.config, 0)?;
        let mut expected = Vec::new();
        net.for_each_param(|t| expected.push(t.dims().to_vec()));
        if expected.len() != self.params.len()
            || expected.iter().zip(&self.params).any(|(d, p)| *d != p.dims)
        {
            return Err(Error::shape("weights do not match the declared architecture"));
        }
        let mut loaded = Vec::with_capacity(self.params.len());
        for p in self.params {
            loaded.push(Tensor::new(p.dims, p.data)?);
        }
        let mut it = loaded.into_iter();
        net.for_each_param_mut(|t| *t = it.next().expect("length checked"));
        Ok(net)
    }
}

// ---------------------------------------------------------------------------
// Peak extraction
// ---------------------------------------------------------------------------

pub const DEFAULT_PEAK_THRESHOLD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Peak {
    pub finger: usize,
    pub row: f64,
    pub col: f64,
    pub score: f64,
}

/// Per-channel argmax refined by a 3x3 intensity-weighted centroid.
///
/// Ties resolve to the first maximum in row-major order. Channels whose
/// maximum is below `threshold` are omitted.
pub fn extract_peaks(stack: &HeatmapStack, threshold: f64) -> Vec<Peak> {
    let (h, w) = (stack.height(), stack.width());
    let mut peaks = Vec::new();
    for k in 0..stack.fingers() {
        let ch = stack.channel(k);
        let mut best = 0usize;
        for (i, &v) in ch.iter().enumerate() {
            if v > ch[best] {
                best = i;
            }
        }
        let score = ch[best] as f64;
        if score < threshold {
            continue;
        }
        let (r0, c0) = (best / w, best % w);
        let (mut sw, mut sr, mut sc) = (0.0, 0.0, 0.0);
        for r in r0.saturating_sub(1)..=(r0 + 1).min(h - 1) {
            for c in c0.saturating_sub(1)..=(c0 + 1).min(w - 1) {
                let v = (ch[r * w + c] as f64).max(0.0);
                sw += v;
                sr += v * r as f64;
                sc += v * c as f64;
            }
        }
        let (row, col) = if sw > 0.0 {
            (sr / sw, sc / sw)
        } else {
            (r0 as f64, c0 as f64)
        };
        peaks.push(Peak {
            finger: k,
            row,
            col,
            score,
        });
    }
    peaks
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ann(id: usize, row: f64, col: f64) -> FingerAnnotation {
        FingerAnnotation { id, row, col }
    }

    #[test]
    fn sigma_follows_short_side() {
        assert_eq!(label_sigma(320, 640), 5.0);
        assert_eq!(label_sigma(640, 320), 5.0);
        assert_eq!(label_sigma(64, 64), 1.0);
    }

    #[test]
    fn label_peak_and_one_sigma_value() {
        let stack = synthesize_labels(&[ann(2, 100.0, 200.0)], 320, 640).unwrap();
        let ch = stack.channel(2);
        assert_eq!(ch[100 * 640 + 200], 1.0);
        assert!((ch[100 * 640 + 205] as f64 - (-0.5f64).exp()).abs() < 1e-6);
        assert!(stack.channel(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn label_validation() {
        assert!(synthesize_labels(&[ann(0, 1.0, 1.0), ann(0, 2.0, 2.0)], 64, 64).is_err());
        assert!(synthesize_labels(&[ann(0, 64.0, 1.0)], 64, 64).is_err());
        assert!(synthesize_labels(&[ann(5, 1.0, 1.0)], 64, 64).is_err());
        assert!(synthesize_labels(&[], 63, 64).is_err());
        let empty = synthesize_labels(&[], 64, 64).unwrap();
        assert_eq!(empty.tensor().max_abs(), 0.0);
    }

    #[test]
    fn label_symmetry_about_integer_centre() {
        let s = synthesize_labels(&[ann(1, 30.0, 40.0)], 64, 80).unwrap();
        let ch = s.channel(1);
        for (dr, dc) in [(1i64, 0i64), (3, 4), (-7, 2), (10, 10)] {
            let a = ch[((30 + dr) * 80 + 40 + dc) as usize];
            let b = ch[((30 - dr) * 80 + 40 - dc) as usize];
            assert_eq!(a, b);
        }
    }

    #[test]
    fn schedule_is_monotone() {
        let s = NoiseSchedule::default();
        assert_eq!(s.steps(), 1000);
        assert!(s.betas().windows(2).all(|w| w[0] < w[1]));
        let abar: Vec<f64> = (1..=1000).map(|t| s.alpha_bar(t).unwrap()).collect();
        assert!(abar.windows(2).all(|w| w[0] > w[1]));
        assert!(abar.iter().all(|&a| a > 0.0 && a < 1.0));
        assert!(s.alpha_bar(0).is_err() && s.alpha_bar(1001).is_err());
    }

    #[test]
    fn forward_noise_cases() {
        let s = NoiseSchedule::default();
        let z0 = Tensor::<f64>::from_f64_vec(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let eps = Tensor::<f64>::from_f64_vec(vec![3], vec![0.3, 0.1, -0.2]).unwrap();
        let near = forward_noise(&z0, 1, &eps, &s).unwrap();
        for (a, b) in near.data().iter().zip(z0.data()) {
            assert!((a - b).abs() < 0.01);
        }
        let zero = Tensor::<f64>::zeros(&[3]).unwrap();
        let zt = forward_noise(&zero, 500, &eps, &s).unwrap();
        let c = (1.0 - s.alpha_bar(500).unwrap()).sqrt();
        for (a, e) in zt.data().iter().zip(eps.data()) {
            assert_eq!(*a, c * e);
        }
        assert!(forward_noise(&z0, 0, &eps, &s).is_err());
        assert!(forward_noise(&z0, 3, &zero.reshape(vec![1, 3]).unwrap(), &s).is_err());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1e-3, 0, 100), 1e-3);
        assert!(cosine_lr(1e-3, 99, 100) <= 1e-6);
        assert!((cosine_lr(1e-3, 50, 101) - 5e-4).abs() < 1e-15);
        assert_eq!(cosine_lr(1e-3, 0, 1), 1e-3);
    }

    #[test]
    fn peaks_tie_break_and_threshold() {
        let mut data = vec![0.0f32; 5 * 4 * 4];
        data[16 + 5] = 0.8; // channel 1, (1,1)
        data[16 + 10] = 0.8; // channel 1, (2,2)
        let stack = HeatmapStack::new(Tensor::new(vec![5, 4, 4], data).unwrap()).unwrap();
        let peaks = extract_peaks(&stack, 0.1);
        assert_eq!(peaks.len(), 1);
        assert_eq!(peaks[0].finger, 1);
        // argmax is (1,1); the centroid is pulled toward (2,2) which lies in its window
        assert!((peaks[0].row - 1.5).abs() < 1e-12 && (peaks[0].col - 1.5).abs() < 1e-12);
        assert_eq!(peaks[0].score, 0.8f32 as f64);
    }

    #[test]
    fn peaks_recover_label_centres() {
        let anns = [
            ann(0, 10.3, 20.7),
            ann(1, 40.0, 90.2),
            ann(2, 55.6, 5.1),
            ann(3, 70.45, 130.5),
            ann(4, 0.0, 159.0),
        ];
        let stack = synthesize_labels(&anns, 80, 160).unwrap();
        let peaks = extract_peaks(&stack, DEFAULT_PEAK_THRESHOLD);
        assert_eq!(peaks.len(), 5);
        for (p, a) in peaks.iter().zip(&anns) {
            assert_eq!(p.finger, a.id);
            assert!((p.row - a.row).abs() <= 0.5 && (p.col - a.col).abs() <= 0.5, "{p:?} vs {a:?}");
        }
    }

    #[test]
    fn synthetic_activations_are_deterministic() {
        let labels = synthesize_labels(&[ann(0, 20.0, 30.0), ann(3, 50.0, 10.0)], 64, 64).unwrap();
        let spec = ShapeSpec::for_labels(64, 64);
        let s = NoiseSchedule::default();
        let a = generate_synthetic_activations(&labels, 7, &spec, &s).unwrap();
        let b = generate_synthetic_activations(&labels, 7, &spec, &s).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_activations(&labels, 8, &spec, &s).unwrap();
        assert_ne!(a.levels, c.levels);
        assert_eq!(a.levels.len(), 3);
        assert_eq!(a.levels[0][1].dims(), &[10, 32, 32]);
    }

    #[test]
    fn zero_noise_activations_are_linear_in_labels() {
        let s = NoiseSchedule::default();
        let mut spec = ShapeSpec::for_labels(64, 64);
        spec.noise_amplitude = 0.0;
        let la = synthesize_labels(&[ann(0, 20.0, 30.0)], 64, 64).unwrap();
        let lb = synthesize_labels(&[ann(1, 40.0, 12.5)], 64, 64).unwrap();
        let sum = HeatmapStack::new(la.tensor().add(lb.tensor()).unwrap()).unwrap();
        let (a, b, ab) = (
            generate_synthetic_activations(&la, 1, &spec, &s).unwrap(),
            generate_synthetic_activations(&lb, 2, &spec, &s).unwrap(),
            generate_synthetic_activations(&sum, 3, &spec, &s).unwrap(),
        );
        for si in 0..3 {
            for l in 0..2 {
                let lhs = ab.levels[si][l].data();
                let rhs = a.levels[si][l].add(&b.levels[si][l]).unwrap();
                for (x, y) in lhs.iter().zip(rhs.data()) {
                    assert!((x - y).abs() < 1e-5);
                }
            }
        }
        let empty = ShapeSpec {
            levels: vec![],
            ..spec
        };
        assert!(generate_synthetic_activations(&la, 1, &empty, &s).is_err());
    }

    fn toy_acts(levels: &[[usize; 3]], steps: usize, seed: u64) -> ActivationSet<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ActivationSet {
            timesteps: (0..steps).map(|i| 1 + 100 * i).collect(),
            levels: (0..steps)
                .map(|_| {
                    levels
                        .iter()
                        .map(|&[c, h, w]| {
                            let v = (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
                            Tensor::from_f64_vec(vec![c, h, w], v).unwrap()
                        })
                        .collect()
                })
                .collect(),
            conditioning: vec![],
        }
    }

    #[test]
    fn single_branch_aggregate_is_the_bottleneck() {
        let acts = toy_acts(&[[3, 4, 4]], 1, 1);
        let net = AffordanceNet::<f64>::init(
            NetConfig {
                level_channels: vec![3],
                timesteps: 1,
                descriptor_channels: 2,
                widths: [4, 3, 2],
                fingers: 5,
                descriptor_size: (4, 4),
                output_size: (8, 8),
            },
            3,
        )
        .unwrap();
        let d = aggregate(&acts, &net.aggregator).unwrap();
        let direct = conv2d(&acts.levels[0][0], &net.aggregator.bottlenecks[0]).unwrap();
        assert_eq!(d.dense, direct);
        assert_eq!(d.pooled, global_avg_pool(&direct).unwrap());
    }

    #[test]
    fn identical_levels_with_equal_logits_average_to_one_branch() {
        let mut acts = toy_acts(&[[3, 4, 4]], 1, 2);
        let dup = acts.levels[0][0].clone();
        acts.levels[0].push(dup);
        let mut net = AffordanceNet::<f64>::init(
            NetConfig {
                level_channels: vec![3, 3],
                timesteps: 1,
                descriptor_channels: 2,
                widths: [4, 3, 2],
                fingers: 5,
                descriptor_size: (4, 4),
                output_size: (8, 8),
            },
            4,
        )
        .unwrap();
        net.aggregator.bottlenecks[1] = net.aggregator.bottlenecks[0].clone();
        let d = aggregate(&acts, &net.aggregator).unwrap();
        let one = conv2d(&acts.levels[0][0], &net.aggregator.bottlenecks[0]).unwrap();
        for (a, b) in d.dense.data().iter().zip(one.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_network_decodes_to_zero_with_expected_shape() {
        let cfg = NetConfig {
            level_channels: vec![4],
            timesteps: 1,
            descriptor_channels: 16,
            widths: [8, 6, 4],
            fingers: 5,
            descriptor_size: (8, 8),
            output_size: (32, 32),
        };
        let net = AffordanceNet::<f32>::init(cfg, 0).unwrap().zeros_like();
        let ag = Tensor::<f32>::filled(&[16, 8, 8], 0.7).unwrap();
        let out = decode(&ag, &net.decoder).unwrap();
        assert_eq!(out.tensor().dims(), &[5, 32, 32]);
        assert_eq!(out.tensor().max_abs(), 0.0);
        assert_eq!(net.decoder.sizes, [(8, 8), (16, 16), (32, 32)]);
    }

    #[test]
    fn inconsistent_size_chain_is_rejected() {
        let cfg = NetConfig {
            level_channels: vec![4],
            timesteps: 1,
            descriptor_channels: 4,
            widths: [4, 4, 4],
            fingers: 5,
            descriptor_size: (8, 8),
            output_size: (12, 32),
        };
        assert!(AffordanceNet::<f32>::init(cfg, 0).is_err());
    }

    #[test]
    fn weights_round_trip_through_json() {
        let cfg = NetConfig {
            level_channels: vec![2, 3],
            timesteps: 2,
            descriptor_channels: 4,
            widths: [4, 3, 2],
            fingers: 5,
            descriptor_size: (4, 4),
            output_size: (8, 8),
        };
        let net = AffordanceNet::<f32>::init(cfg, 9).unwrap();
        let text = serde_json::to_string(&NetWeights::from_net(&net)).unwrap();
        let back: NetWeights = serde_json::from_str(&text).unwrap();
        assert_eq!(back.into_net().unwrap(), net);
    }

    #[test]
    fn zero_step_training_keeps_init() {
        let labels = synthesize_labels(&[ann(0, 20.0, 30.0)], 64, 64).unwrap();
        let spec = ShapeSpec::for_labels(64, 64);
        let acts = generate_synthetic_activations(&labels, 1, &spec, &NoiseSchedule::default()).unwrap();
        let cfg = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        let out = train_decoder(&[(acts.clone(), labels.clone())], &cfg).unwrap();
        assert!(out.history.is_empty());
        let init = AffordanceNet::<f32>::init(net_config_for(&acts, &labels, &cfg).unwrap(), cfg.seed).unwrap();
        assert_eq!(out.net, init);
        assert!(train_decoder(&[], &cfg).is_err());
    }
}
