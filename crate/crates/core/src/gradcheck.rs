//! Central finite-difference checks for layer and network gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::affordance_net::{ActivationSet, AffordanceNet, NetConfig};
use crate::error::Result;
use crate::tensorkit::{
    mse, mse_backward, BilinearUpsample, Conv2d, GlobalAvgPool, Layer, Padding, Relu, Softmax, Tensor,
};

/// Denominator floor of [`relative_error`], so that two gradients that are
/// both numerically zero compare as equal.
pub const RELATIVE_FLOOR: f64 = 1e-6;

pub const DEFAULT_STEP: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheck {
    pub name: String,
    pub checked: usize,
    pub max_relative_error: f64,
}

fn random_tensor(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor<f64> {
    let n = dims.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(dims.to_vec(), data).expect("dims match data")
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Central difference of `f` in every coordinate of `x`, compared with `grad`.
fn compare(x: &mut [f64], grad: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> Result<f64>) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(x)?;
        x[i] = orig - h;
        let fm = f(x)?;
        x[i] = orig;
        worst = worst.max(relative_error(grad[i], (fp - fm) / (2.0 * h)));
    }
    Ok(worst)
}

/// Input gradient of `<upstream, layer(x)>`.
pub fn check_input_gradient<L: Layer<f64>>(layer: &L, input: &Tensor<f64>, upstream: &Tensor<f64>, h: f64) -> Result<f64> {
    let grad = layer.backward(input, upstream)?.input_grad;
    let dims = input.dims().to_vec();
    let mut x = input.data().to_vec();
    compare(&mut x, grad.data(), h, |x| {
        Ok(dot(upstream, &layer.forward(&Tensor::new(dims.clone(), x.to_vec())?)?))
    })
}

/// Kernel and bias gradients of `<upstream, conv(x)>`.
pub fn check_conv_params(conv: &Conv2d<f64>, input: &Tensor<f64>, upstream: &Tensor<f64>, h: f64) -> Result<f64> {
    let grads = conv.backward(input, upstream)?.param_grads;
    let mut k = conv.kernel.data().to_vec();
    let e1 = compare(&mut k, grads["kernel"].data(), h, |k| {
        let c = Conv2d::new(Tensor::new(conv.kernel.dims().to_vec(), k.to_vec())?, conv.bias.clone(), conv.padding)?;
        Ok(dot(upstream, &c.forward(input)?))
    })?;
    let mut b = conv.bias.data().to_vec();
    let e2 = compare(&mut b, grads["bias"].data(), h, |b| {
        let c = Conv2d::new(conv.kernel.clone(), Tensor::new(conv.bias.dims().to_vec(), b.to_vec())?, conv.padding)?;
        Ok(dot(upstream, &c.forward(input)?))
    })?;
    Ok(e1.max(e2))
}

/// Gradient of the mean squared error with respect to the prediction.
pub fn check_mse(pred: &Tensor<f64>, target: &Tensor<f64>, h: f64) -> Result<f64> {
    let grad = mse_backward(pred, target, 1.0)?;
    let mut x = pred.data().to_vec();
    compare(&mut x, grad.data(), h, |x| mse(&Tensor::new(pred.dims().to_vec(), x.to_vec())?, target))
}

/// Every layer on small seeded shapes.
pub fn layer_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut push = |name: &str, checked: usize, err: f64| {
        out.push(GradCheck {
            name: name.to_string(),
            checked,
            max_relative_error: err,
        })
    };
    for (name, k, padding, (h, w)) in [
        ("conv3x3 same", 3, Padding::Same, (5, 6)),
        ("conv3x3 valid", 3, Padding::Valid, (5, 6)),
        ("conv1x1", 1, Padding::Same, (4, 3)),
    ] {
        let conv = Conv2d::new(random_tensor(&mut rng, &[3, 2, k, k]), random_tensor(&mut rng, &[3]), padding)?;
        let x = random_tensor(&mut rng, &[2, h, w]);
        let y = conv.forward(&x)?;
        let up = random_tensor(&mut rng, y.dims());
        let e_in = check_input_gradient(&conv, &x, &up, DEFAULT_STEP)?;
        let e_par = check_conv_params(&conv, &x, &up, DEFAULT_STEP)?;
        push(name, x.len() + conv.kernel.len() + conv.bias.len(), e_in.max(e_par));
    }
    for (name, from, to) in [
        ("bilinear upsample x2", (3, 4), (6, 8)),
        ("bilinear upsample uneven", (3, 5), (7, 9)),
        ("bilinear downsample", (6, 8), (3, 4)),
    ] {
        let x = random_tensor(&mut rng, &[2, from.0, from.1]);
        let up = random_tensor(&mut rng, &[2, to.0, to.1]);
        let err = if to.0 >= from.0 {
            check_input_gradient(&BilinearUpsample { target: to }, &x, &up, DEFAULT_STEP)?
        } else {
            let grad = crate::tensorkit::bilinear_resize_backward((2, from.0, from.1), &up)?;
            let mut data = x.data().to_vec();
            compare(&mut data, grad.data(), DEFAULT_STEP, |d| {
                let t = crate::tensorkit::bilinear_resize(&Tensor::new(x.dims().to_vec(), d.to_vec())?, to)?;
                Ok(dot(&up, &t))
            })?
        };
        push(name, x.len(), err);
    }
    let x = random_tensor(&mut rng, &[3, 4, 5]);
    let up = random_tensor(&mut rng, &[3]);
    push("global average pool", x.len(), check_input_gradient(&GlobalAvgPool, &x, &up, DEFAULT_STEP)?);
    let x = random_tensor(&mut rng, &[6]);
    let up = random_tensor(&mut rng, &[6]);
    push("softmax", x.len(), check_input_gradient(&Softmax, &x, &up, DEFAULT_STEP)?);
    // keep relu inputs away from the kink
    let x = random_tensor(&mut rng, &[2, 3, 4]).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v })?;
    let up = random_tensor(&mut rng, x.dims());
    push("relu", x.len(), check_input_gradient(&Relu, &x, &up, DEFAULT_STEP)?);
    let p = random_tensor(&mut rng, &[2, 3, 4]);
    let t = random_tensor(&mut rng, &[2, 3, 4]);
    push("mse", p.len(), check_mse(&p, &t, DEFAULT_STEP)?);
    Ok(out)
}

/// Toy aggregator + decoder with random weights and mixing logits.
pub fn toy_network(seed: u64) -> Result<(AffordanceNet<f64>, ActivationSet<f64>, Tensor<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = NetConfig {
        level_channels: vec![3, 4],
        timesteps: 2,
        descriptor_channels: 4,
        widths: [5, 4, 3],
        fingers: 2,
        descriptor_size: (3, 4),
        output_size: (7, 9),
    };
    let mut net = AffordanceNet::<f32>::init(config, seed)?.cast::<f64>();
    net.aggregator.logits = random_tensor(&mut rng, &[2, 2]);
    let levels = (0..2)
        .map(|_| vec![random_tensor(&mut rng, &[3, 6, 8]), random_tensor(&mut rng, &[4, 3, 4])])
        .collect();
    let acts = ActivationSet {
        timesteps: vec![10, 200],
        levels,
        conditioning: vec![],
    };
    let target = random_tensor(&mut rng, &[2, 7, 9]);
    Ok((net, acts, target))
}

/// Every parameter of the aggregator + decoder composite against the loss.
pub fn check_network(net: &AffordanceNet<f64>, acts: &ActivationSet<f64>, target: &Tensor<f64>, h: f64) -> Result<GradCheck> {
    let (_, grads) = net.loss_and_grad(acts, target)?;
    let mut analytic = Vec::new();
    grads.for_each_param(|t| analytic.extend_from_slice(t.data()));
    let mut flat = Vec::new();
    net.for_each_param(|t| flat.extend_from_slice(t.data()));
    let mut work = net.clone();
    let err = compare(&mut flat, &analytic, h, |x| {
        let mut offset = 0;
        work.for_each_param_mut(|t| {
            let n = t.len();
            t.data_mut().copy_from_slice(&x[offset..offset + n]);
            offset += n;
        });
        Ok(work.loss_and_grad(acts, target)?.0)
    })?;
    Ok(GradCheck {
        name: "aggregator + decoder".into(),
        checked: analytic.len(),
        max_relative_error: err,
    })
}
