//! Batch normalization over the last (channel) axis.
//!
//! Statistics pool every leading index, so for an NHWC batch of `m` maps of size
//! `p × q` each channel sees `m·p·q` values.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1e-3;
pub const DEFAULT_MOMENTUM: f64 = 0.99;

#[derive(Clone, Debug)]
pub struct BatchNormCache {
    pub x_hat: Tensor,
    pub centered: Tensor,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub epsilon: f64,
}

fn channels(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<usize> {
    let c = *x.shape().last().unwrap();
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(format!(
            "batch norm over {c} channels needs [{c}] scale/shift, got {:?}/{:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    Ok(c)
}

/// Train-mode forward: batch statistics, `y = γ·x̂ + β`.
pub fn batchnorm_train_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    epsilon: f64,
) -> Result<(Tensor, BatchNormCache)> {
    let c = channels(x, gamma, beta)?;
    let m = (x.len() / c) as f64;

    let mut mean = vec![0.0; c];
    for row in x.data().chunks_exact(c) {
        for (a, &v) in mean.iter_mut().zip(row) {
            *a += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);

    let mut centered = x.data().to_vec();
    let mut var = vec![0.0; c];
    for row in centered.chunks_exact_mut(c) {
        for k in 0..c {
            row[k] -= mean[k];
            var[k] += row[k] * row[k];
        }
    }
    var.iter_mut().for_each(|v| *v /= m);

    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
    let mut x_hat = centered.clone();
    let mut y = vec![0.0; x.len()];
    for (xr, yr) in x_hat.chunks_exact_mut(c).zip(y.chunks_exact_mut(c)) {
        for k in 0..c {
            xr[k] *= inv_std[k];
            yr[k] = gamma.data()[k] * xr[k] + beta.data()[k];
        }
    }
    let shape = x.shape().to_vec();
    Ok((
        Tensor::from_parts(shape.clone(), y),
        BatchNormCache {
            x_hat: Tensor::from_parts(shape.clone(), x_hat),
            centered: Tensor::from_parts(shape, centered),
            mean,
            var,
            epsilon,
        },
    ))
}

/// Infer-mode forward with fixed running statistics.
pub fn batchnorm_infer_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &[f64],
    running_var: &[f64],
    epsilon: f64,
) -> Result<Tensor> {
    let c = channels(x, gamma, beta)?;
    if running_mean.len() != c || running_var.len() != c {
        return Err(Error::shape("running statistics do not match channel count"));
    }
    let scale: Vec<f64> = (0..c)
        .map(|k| gamma.data()[k] / (running_var[k] + epsilon).sqrt())
        .collect();
    let mut y = x.data().to_vec();
    for row in y.chunks_exact_mut(c) {
        for k in 0..c {
            row[k] = (row[k] - running_mean[k]) * scale[k] + beta.data()[k];
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), y))
}

#[derive(Clone, Debug)]
pub struct BatchNormGrads {
    pub input: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

/// Backward pass through the train-mode normalization, step by step through
/// `∂L/∂x̂`, `∂L/∂σ²`, `∂L/∂μ`, then `∂L/∂x`, `∂L/∂γ` and `∂L/∂β`.
pub fn batchnorm_backward(
    grad_out: &Tensor,
    cache: &BatchNormCache,
    gamma: &Tensor,
) -> Result<BatchNormGrads> {
    grad_out.same_shape(&cache.x_hat, "batch norm backward")?;
    let c = cache.mean.len();
    if gamma.shape() != [c] {
        return Err(Error::shape("batch norm scale does not match cache"));
    }
    let m = (grad_out.len() / c) as f64;
    let g = gamma.data();
    let dy = grad_out.data();
    let inv_std: Vec<f64> = cache.var.iter().map(|v| 1.0 / (v + cache.epsilon).sqrt()).collect();

    // ∂L/∂x̂ = γ·∂L/∂y
    let dx_hat: Vec<f64> = dy
        .chunks_exact(c)
        .flat_map(|row| row.iter().zip(g).map(|(d, gk)| d * gk))
        .collect();

    // ∂L/∂σ² = Σ ∂L/∂x̂ · (x − μ) · (−½)(σ² + ε)^(−3/2)
    // ∂L/∂μ  = Σ ∂L/∂x̂ · (−1/√(σ² + ε))
    let mut dvar = vec![0.0; c];
    let mut dmean = vec![0.0; c];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for (((dxh, xc), xh), d) in dx_hat
        .chunks_exact(c)
        .zip(cache.centered.data().chunks_exact(c))
        .zip(cache.x_hat.data().chunks_exact(c))
        .zip(dy.chunks_exact(c))
    {
        for k in 0..c {
            dvar[k] += dxh[k] * xc[k];
            dmean[k] += dxh[k];
            dgamma[k] += d[k] * xh[k];
            dbeta[k] += d[k];
        }
    }
    for k in 0..c {
        dvar[k] *= -0.5 * inv_std[k].powi(3);
        dmean[k] *= -inv_std[k];
    }

    // ∂L/∂x_i = ∂L/∂x̂_i/√(σ² + ε) + ∂L/∂σ² · 2(x_i − μ)/m + ∂L/∂μ / m
    let mut dx = vec![0.0; dy.len()];
    for ((o, dxh), xc) in dx
        .chunks_exact_mut(c)
        .zip(dx_hat.chunks_exact(c))
        .zip(cache.centered.data().chunks_exact(c))
    {
        for k in 0..c {
            o[k] = dxh[k] * inv_std[k] + dvar[k] * 2.0 * xc[k] / m + dmean[k] / m;
        }
    }
    Ok(BatchNormGrads {
        input: Tensor::from_parts(grad_out.shape().to_vec(), dx),
        gamma: Tensor::from_parts(vec![c], dgamma),
        beta: Tensor::from_parts(vec![c], dbeta),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len(), 1], v.to_vec()).unwrap()
    }

    #[test]
    fn normalizes_small_batch() {
        let x = col(&[1.0, 2.0, 3.0]);
        let (y, _) = batchnorm_train_forward(&x, &Tensor::filled(vec![1], 1.0), &Tensor::zeros(vec![1]), 0.0).unwrap();
        let r = 1.5f64.sqrt();
        for (a, b) in y.data().iter().zip([-r, 0.0, r]) {
            assert!((a - b).abs() < 1e-12);
        }
        let (y, _) = batchnorm_train_forward(
            &x,
            &Tensor::filled(vec![1], 2.0),
            &Tensor::filled(vec![1], 5.0),
            0.0,
        )
        .unwrap();
        for (a, b) in y.data().iter().zip([5.0 - 2.0 * r, 5.0, 5.0 + 2.0 * r]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_batch_maps_to_shift() {
        let x = Tensor::filled(vec![4, 3, 3, 2], 7.5);
        let beta = Tensor::new(vec![2], vec![0.25, -1.0]).unwrap();
        let (y, _) = batchnorm_train_forward(&x, &Tensor::filled(vec![2], 3.0), &beta, 1e-3).unwrap();
        for row in y.data().chunks_exact(2) {
            assert_eq!(row, beta.data());
        }
    }

    #[test]
    fn gradient_edge_cases() {
        let x = Tensor::from_fn(vec![8, 4], |i| ((i * 37 % 11) as f64).sin());
        let gamma = Tensor::from_fn(vec![4], |i| 0.5 + i as f64);
        let (_, cache) = batchnorm_train_forward(&x, &gamma, &Tensor::zeros(vec![4]), 1e-3).unwrap();

        let g = batchnorm_backward(&Tensor::zeros(vec![8, 4]), &cache, &gamma).unwrap();
        assert!(g.input.data().iter().chain(g.gamma.data()).chain(g.beta.data()).all(|&v| v == 0.0));

        // grad_out = x̂ gives ∂L/∂γ = Σ x̂² per channel.
        let g = batchnorm_backward(&cache.x_hat, &cache, &gamma).unwrap();
        for k in 0..4 {
            let expect: f64 = cache.x_hat.data().iter().skip(k).step_by(4).map(|v| v * v).sum();
            assert!((g.gamma.data()[k] - expect).abs() < 1e-12);
        }
    }
}
