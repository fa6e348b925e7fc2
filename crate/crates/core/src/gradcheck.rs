//! Central finite-difference checks for every backward pass.
//!
//! Each check projects the layer output onto a random tensor `r` so the scalar
//! `L = Σ r ⊙ f(x)` has `∂L/∂f = r`, then compares the analytic gradient to the
//! five-point central difference
//! `(−L(x + 2h) + 8L(x + h) − 8L(x − h) + L(x − 2h)) / 12h` entry by entry.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::loss;
use crate::nn::activation::{self, Activation};
use crate::nn::batchnorm;
use crate::nn::conv;
use crate::nn::dense;
use crate::nn::dropout;
use crate::nn::pool::{self, PoolGeometry};
use crate::nn::skip;
use crate::nn::upsample;
use crate::nn::{InitDistribution, LayerSpec, Network};
use crate::optim::RegSpec;
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-3;
/// Magnitude below which gradients are compared absolutely.
pub const FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, FLOOR)`
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_error(a, n))
        .fold(0.0, f64::max)
}

/// Fourth-order central differences of `f` at `x`, one coordinate at a time.
/// Inputs must stay at least `2h` from any kink of `f`.
pub fn numeric_grad(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> Result<f64>) -> Result<Vec<f64>> {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let v = x.data()[i];
        let mut at = |d: f64| {
            probe.data_mut()[i] = v + d;
            f(&probe)
        };
        let (p2, p1, m1, m2) = (at(2.0 * h)?, at(h)?, at(-h)?, at(-2.0 * h)?);
        probe.data_mut()[i] = v;
        out.push((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h));
    }
    Ok(out)
}

/// Neumaier-compensated `Σ a ⊙ b`, so perturbing one entry changes the sum by
/// little more than that entry's own rounding.
fn dot(a: &Tensor, b: &Tensor) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for (x, y) in a.data().iter().zip(b.data()) {
        let v = x * y;
        let t = sum + v;
        comp += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + comp
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub instances: usize,
    pub max_rel_error: f64,
}

struct Acc {
    name: &'static str,
    instances: usize,
    worst: f64,
}

impl Acc {
    fn new(name: &'static str) -> Self {
        Acc {
            name,
            instances: 0,
            worst: 0.0,
        }
    }

    fn push(&mut self, analytic: &Tensor, numeric: &[f64]) {
        self.worst = self.worst.max(max_rel_error(analytic.data(), numeric));
    }

    fn done(self) -> CheckResult {
        CheckResult {
            name: self.name.to_string(),
            instances: self.instances,
            max_rel_error: self.worst,
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Uniform samples pushed at least `gap` away from zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let v: f64 = rng.random_range(gap..1.0);
        if rng.random::<bool>() {
            v
        } else {
            -v
        }
    })
}

/// Distinct values in every pooling window: a shuffled grid spaced well above the step.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 / n as f64 - 0.5).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
    Tensor::new(shape.to_vec(), v).expect("finite grid")
}

fn check_conv(rng: &mut ChaCha8Rng, acc: &mut Acc) -> Result<()> {
    let x = uniform(rng, &[2, 6, 6, 2], -1.0, 1.0);
    let w = uniform(rng, &[3, 3, 2, 3], -1.0, 1.0);
    let b = uniform(rng, &[3], -1.0, 1.0);
    let y = conv::conv2d_forward(&x, &w, &b)?;
    let r = uniform(rng, y.shape(), -1.0, 1.0);
    let g = conv::conv2d_backward(&r, &x, &w)?;
    acc.push(&g.input, &numeric_grad(&x, STEP, |p| Ok(dot(&r, &conv::conv2d_forward(p, &w, &b)?)))?);
    acc.push(&g.weights, &numeric_grad(&w, STEP, |p| Ok(dot(&r, &conv::conv2d_forward(&x, p, &b)?)))?);
    acc.push(&g.bias, &numeric_grad(&b, STEP, |p| Ok(dot(&r, &conv::conv2d_forward(&x, &w, p)?)))?);
    Ok(())
}

fn check_dense(rng: &mut ChaCha8Rng, acc: &mut Acc) -> Result<()> {
    let act = Activation::Sigmoid;
    let x = uniform(rng, &[3, 5], -1.0, 1.0);
    let w = uniform(rng, &[4, 5], -1.0, 1.0);
    let b = uniform(rng, &[4], -1.0, 1.0);
    let (y, z) = dense::dense_forward(&x, &w, &b, act)?;
    let r = uniform(rng, y.shape(), -1.0, 1.0);
    let g = dense::dense_backward(&r, &x, &z, &w, act)?;
    let f = |x: &Tensor, w: &Tensor, b: &Tensor| -> Result<f64> { Ok(dot(&r, &dense::dense_forward(x, w, b, act)?.0)) };
    acc.push(&g.input, &numeric_grad(&x, STEP, |p| f(p, &w, &b))?);
    acc.push(&g.weights, &numeric_grad(&w, STEP, |p| f(&x, p, &b))?);
    acc.push(&g.bias, &numeric_grad(&b, STEP, |p| f(&x, &w, p))?);
    Ok(())
}

fn check_leaky(rng: &mut ChaCha8Rng, acc: &mut Acc) -> Result<()> {
    let alpha = activation::DEFAULT_LEAK;
    let x = away_from_zero(rng, &[2, 4, 4, 3], 1e-2);
    let r = uniform(rng, x.shape(), -1.0, 1.0);
    let g = activation::leaky_relu_backward(&r, &x, alpha)?;
    acc.push(&g, &numeric_grad(&x, STEP, |p| Ok(dot(&r, &activation::leaky_relu_forward(p, alpha)?)))?);
    Ok(())
}

fn check_sigmoid(rng: &mut ChaCha8Rng, acc: &mut Acc) -> Result<()> {
    let x = uniform(rng, &[2, 4, 4, 3], -4.0, 4.0);
    let r = uniform(rng, x.shape(), -1.0, 1.0);
    let g = activation::sigmoid_backward(&r, &activation::sigmoid_forward(&x))?;
    acc.push(&g, &numeric_grad(&x, STEP, |p| Ok(dot(&r, &activation::sigmoid_forward(p))))?);
    Ok(())
}

fn check_softmax(rng: &mut ChaCha8Rng, acc: &mut Acc) -> Result<()> {
    let x = uniform(rng, &[4, 6], -3.0, 3.0);
    let r = uniform(rng, x.shape(), -1.0, 1.0);
    let g = activation::softmax_backward(&r, &activation::softmax_forward(&x))?;
    acc.push(&g, &numeric_grad(&x, STEP, |p| Ok(dot(&r, &activation::softmax_forward(p))))?);
    Ok(())
}

fn check_batchnorm(rng: &mut ChaCha8Rng, acc: &mut Acc) -> Result<()> {
    let eps = batchnorm::DEFAULT_EPSILON;
    let x = uniform(rng, &[8, 4], -2.0, 2.0);
    let gamma = uniform(rng, &[4], 0.5, 1.5);
    let beta = uniform(rng, &[4], -1.0, 1.0);
    let (y, cache) = batchnorm::batchnorm_train_forward(&x, &gamma, &beta, eps)?;
    let r = uniform(rng, y.shape(), -1.0, 1.0);
    let g = batchnorm::batchnorm_backward(&r, &cache, &gamma)?;
    let f = |x: &Tensor, gm: &Tensor, bt: &Tensor| -> Result<f64> {
        Ok(dot(&r, &batchnorm::batchnorm_train_forward(x, gm, bt, eps)?.0))
    };
    acc.push(&g.input, &numeric_grad(&x, STEP, |p| f(p, &gamma, &beta))?);
    acc.push(&g.gamma, &numeric_grad(&gamma, STEP, |p| f(&x, p, &beta))?);
    acc.push(&g.beta, &numeric_grad(&beta, STEP, |p| f(&x, &gamma, p))?);
    Ok(())
}

fn check_dropout(rng: &mut ChaCha8Rng, acc: &mut Acc) -> Result<()> {
    let x = uniform(rng, &[2, 5, 5, 2], -1.0, 1.0);
    let mask = dropout::dropout_mask(x.shape(), 0.2, rng)?;
    let r = uniform(rng, x.shape(), -1.0, 1.0);
    let g = dropout::dropout_apply(&r, &mask)?;
    acc.push(&g, &numeric_grad(&x, STEP, |p| Ok(dot(&r, &dropout::dropout_apply(p, &mask)?)))?);
    Ok(())
}

fn check_avgpool(rng: &mut ChaCha8Rng, acc: &mut Acc) -> Result<()> {
    let geo = PoolGeometry::new((2, 2), (2, 2))?;
    let x = uniform(rng, &[2, 6, 4, 3], -1.0, 1.0);
    let y = pool::avgpool_forward(&x, geo)?;
    let r = uniform(rng, y.shape(), -1.0, 1.0);
    let g = pool::avgpool_backward(&r, x.shape(), geo)?;
    acc.push(&g, &numeric_grad(&x, STEP, |p| Ok(dot(&r, &pool::avgpool_forward(p, geo)?)))?);
    Ok(())
}

fn check_maxpool(rng: &mut ChaCha8Rng, acc: &mut Acc) -> Result<()> {
    let geo = PoolGeometry::new((2, 2), (2, 2))?;
    let x = distinct(rng, &[2, 6, 4, 3]);
    let (y, arg) = pool::maxpool_forward(&x, geo)?;
    let r = uniform(rng, y.shape(), -1.0, 1.0);
    let g = pool::maxpool_backward(&r, x.shape(), &arg)?;
    acc.push(&g, &numeric_grad(&x, STEP, |p| Ok(dot(&r, &pool::maxpool_forward(p, geo)?.0)))?);
    Ok(())
}

fn check_upsample(rng: &mut ChaCha8Rng, acc: &mut Acc) -> Result<()> {
    let x = uniform(rng, &[2, 3, 4, 2], -1.0, 1.0);
    let y = upsample::upsample_forward(&x, (2, 3))?;
    let r = uniform(rng, y.shape(), -1.0, 1.0);
    let g = upsample::upsample_backward(&r, x.shape(), (2, 3))?;
    acc.push(&g, &numeric_grad(&x, STEP, |p| Ok(dot(&r, &upsample::upsample_forward(p, (2, 3))?)))?);
    Ok(())
}

fn check_add_skip(rng: &mut ChaCha8Rng, acc: &mut Acc) -> Result<()> {
    let a = uniform(rng, &[2, 3, 3, 2], -1.0, 1.0);
    let b = uniform(rng, a.shape(), -1.0, 1.0);
    let r = uniform(rng, a.shape(), -1.0, 1.0);
    let (ga, gb) = skip::add_skip_backward(&r);
    acc.push(&ga, &numeric_grad(&a, STEP, |p| Ok(dot(&r, &skip::add_skip(p, &b)?)))?);
    acc.push(&gb, &numeric_grad(&b, STEP, |p| Ok(dot(&r, &skip::add_skip(&a, p)?)))?);
    Ok(())
}

fn check_concat_skip(rng: &mut ChaCha8Rng, acc: &mut Acc) -> Result<()> {
    let a = uniform(rng, &[2, 3, 3, 2], -1.0, 1.0);
    let b = uniform(rng, &[2, 3, 3, 3], -1.0, 1.0);
    let y = skip::concat_skip(&a, &b)?;
    let r = uniform(rng, y.shape(), -1.0, 1.0);
    let (ga, gb) = skip::concat_skip_backward(&r, 2)?;
    acc.push(&ga, &numeric_grad(&a, STEP, |p| Ok(dot(&r, &skip::concat_skip(p, &b)?)))?);
    acc.push(&gb, &numeric_grad(&b, STEP, |p| Ok(dot(&r, &skip::concat_skip(&a, p)?)))?);
    Ok(())
}

fn check_mse(rng: &mut ChaCha8Rng, acc: &mut Acc) -> Result<()> {
    let p = uniform(rng, &[3, 4, 4], -1.0, 1.0);
    let t = uniform(rng, p.shape(), -1.0, 1.0);
    let l = loss::mse(&p, &t)?;
    acc.push(l.grad(), &numeric_grad(&p, STEP, |q| Ok(loss::mse(q, &t)?.value))?);
    Ok(())
}

fn check_iou(rng: &mut ChaCha8Rng, acc: &mut Acc) -> Result<()> {
    let t = uniform(rng, &[3, 4, 4], 0.1, 0.9);
    // keep |p − t| ≥ 0.01 so no entry sits on the min/max switch
    let p = Tensor::from_fn(t.shape().to_vec(), |i| {
        let off: f64 = rng.random_range(0.01..0.09);
        if rng.random::<bool>() {
            t.data()[i] + off
        } else {
            t.data()[i] - off
        }
    });
    let l = loss::iou_loss(&p, &t)?;
    acc.push(l.grad(), &numeric_grad(&p, STEP, |q| Ok(loss::iou_loss(q, &t)?.value))?);
    Ok(())
}

fn check_entropy_like(rng: &mut ChaCha8Rng, acc: &mut Acc) -> Result<()> {
    // the gradient vanishes at p = t, so keep the two apart
    let p = uniform(rng, &[3, 4, 4], 0.1, 0.9);
    let t = Tensor::from_fn(p.shape().to_vec(), |i| {
        let off: f64 = rng.random_range(0.02..0.08);
        if p.data()[i] > 0.5 {
            p.data()[i] - off
        } else {
            p.data()[i] + off
        }
    });
    let l = loss::entropy_like(&p, &t)?;
    acc.push(l.grad(), &numeric_grad(&p, STEP, |q| Ok(loss::entropy_like(q, &t)?.value))?);
    Ok(())
}

fn check_clinical(rng: &mut ChaCha8Rng, acc: &mut Acc) -> Result<()> {
    let p = uniform(rng, &[2, 3, 3, 3], 0.1, 0.9);
    let t = uniform(rng, p.shape(), 0.1, 0.9);
    let l = loss::clinical_loss(&p, &t)?;
    acc.push(l.grad(), &numeric_grad(&p, STEP, |q| Ok(loss::clinical_loss(q, &t)?.value))?);
    let l = loss::clinical_loss_inverse(&p, &t, loss::CLINICAL_C)?;
    acc.push(
        l.grad(),
        &numeric_grad(&p, STEP, |q| Ok(loss::clinical_loss_inverse(q, &t, loss::CLINICAL_C)?.value))?,
    );
    Ok(())
}

/// End-to-end check on a network: every parameter gradient and the input gradient
/// against finite differences of the scalar loss.
pub fn check_network(net: &mut Network, x: &Tensor, target: &Tensor, kind: loss::LossKind) -> Result<f64> {
    let (y, trace) = net.forward(x)?;
    let l = kind.evaluate(&y, target)?;
    let gx = net.backward(trace, l.grad())?;
    let analytic: Vec<Tensor> = net.params().map(|p| p.grad.clone()).collect();
    let mut worst: f64 = 0.0;
    for (k, a) in analytic.iter().enumerate() {
        let value = net.params().nth(k).unwrap().value.clone();
        let numeric = numeric_grad(&value, STEP, |v| {
            net.params_mut().nth(k).unwrap().value = v.clone();
            let out = net.predict(x)?;
            Ok(kind.evaluate(&out, target)?.value)
        })?;
        net.params_mut().nth(k).unwrap().value = value;
        worst = worst.max(max_rel_error(a.data(), &numeric));
    }
    let numeric = numeric_grad(x, STEP, |v| Ok(kind.evaluate(&net.predict(v)?, target)?.value))?;
    worst = worst.max(max_rel_error(gx.data(), &numeric));
    Ok(worst)
}

fn check_net_conv(rng: &mut ChaCha8Rng, acc: &mut Acc) -> Result<()> {
    let mut net = Network::new(
        vec![5, 5, 2],
        vec![
            LayerSpec::Conv2D { filters: 2, kernel: (3, 3), reg: RegSpec::None },
            LayerSpec::Sigmoid,
        ],
        InitDistribution::Uniform,
        rng.random(),
    )?;
    let x = uniform(rng, &[2, 5, 5, 2], -1.0, 1.0);
    let t = uniform(rng, &[2, 3, 3, 2], 0.0, 1.0);
    acc.worst = acc.worst.max(check_network(&mut net, &x, &t, loss::LossKind::Mse)?);
    Ok(())
}

fn check_net_dense(rng: &mut ChaCha8Rng, acc: &mut Acc) -> Result<()> {
    let mut net = Network::new(
        vec![4],
        vec![
            LayerSpec::Dense { units: 5, activation: Activation::Sigmoid, reg: RegSpec::None },
            LayerSpec::Dense { units: 3, activation: Activation::Sigmoid, reg: RegSpec::None },
        ],
        InitDistribution::Normal,
        rng.random(),
    )?;
    let x = uniform(rng, &[3, 4], -1.0, 1.0);
    let t = uniform(rng, &[3, 3], 0.0, 1.0);
    acc.worst = acc.worst.max(check_network(&mut net, &x, &t, loss::LossKind::Mse)?);
    Ok(())
}

/// A small graph with both skip kinds, batch norm, pooling and upsampling.
fn check_net_skips(rng: &mut ChaCha8Rng, acc: &mut Acc) -> Result<()> {
    let mut net = Network::new(
        vec![8, 8, 1],
        vec![
            LayerSpec::Conv2D { filters: 2, kernel: (3, 3), reg: RegSpec::None },
            LayerSpec::Sigmoid,
            LayerSpec::BatchNorm { epsilon: 1e-3, momentum: 0.99 },
            LayerSpec::AvgPool { pool: (2, 2), stride: (2, 2) },
            LayerSpec::Conv2D { filters: 2, kernel: (1, 1), reg: RegSpec::None },
            LayerSpec::AddSkip { source: 3 },
            LayerSpec::Upsample { factors: (2, 2) },
            LayerSpec::CenterCrop { size: (5, 5) },
            LayerSpec::ConcatSkip { source: 2 },
            LayerSpec::Conv2D { filters: 1, kernel: (3, 3), reg: RegSpec::None },
            LayerSpec::Sigmoid,
        ],
        InitDistribution::Uniform,
        rng.random(),
    )?;
    let x = uniform(rng, &[3, 8, 8, 1], -1.0, 1.0);
    let t = uniform(rng, &[3, 3, 3, 1], 0.0, 1.0);
    acc.worst = acc.worst.max(check_network(&mut net, &x, &t, loss::LossKind::Mse)?);
    Ok(())
}

type Check = fn(&mut ChaCha8Rng, &mut Acc) -> Result<()>;

const CHECKS: &[(&str, Check)] = &[
    ("conv2d", check_conv),
    ("dense", check_dense),
    ("leaky_relu", check_leaky),
    ("sigmoid", check_sigmoid),
    ("softmax", check_softmax),
    ("batch_norm", check_batchnorm),
    ("dropout", check_dropout),
    ("avg_pool", check_avgpool),
    ("max_pool", check_maxpool),
    ("upsample", check_upsample),
    ("add_skip", check_add_skip),
    ("concat_skip", check_concat_skip),
    ("loss_mse", check_mse),
    ("loss_iou", check_iou),
    ("loss_entropy_like", check_entropy_like),
    ("loss_clinical", check_clinical),
    ("net_conv_sigmoid", check_net_conv),
    ("net_dense_2layer", check_net_dense),
    ("net_skips", check_net_skips),
];

pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|(n, _)| *n).collect()
}

/// Runs every check on `instances` random draws each.
pub fn run_suite(instances: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::with_capacity(CHECKS.len());
    for (k, (name, check)) in CHECKS.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64 * 0x9E37_79B9));
        let mut acc = Acc::new(name);
        for _ in 0..instances {
            check(&mut rng, &mut acc)?;
            acc.instances += 1;
        }
        out.push(acc.done());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_error_floor() {
        assert_eq!(rel_error(1.0, 1.0), 0.0);
        assert!((rel_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((rel_error(0.0, 1e-9) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn numeric_grad_of_cube() {
        let x = Tensor::new(vec![2], vec![1.0, -2.0]).unwrap();
        let g = numeric_grad(&x, STEP, |p| Ok(p.data().iter().map(|v| v * v * v).sum())).unwrap();
        assert!((g[0] - 3.0).abs() < 1e-8);
        assert!((g[1] - 12.0).abs() < 1e-8);
    }

    #[test]
    fn suite_passes_quickly() {
        for r in run_suite(2, 99).unwrap() {
            assert!(r.max_rel_error <= 1e-5, "{}: {:e}", r.name, r.max_rel_error);
        }
    }
}
