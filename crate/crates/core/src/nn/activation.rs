//! Pointwise activations and the per-sample softmax.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default leak constant of the U-Net's LeakyReLU units.
pub const DEFAULT_LEAK: f64 = 5.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Sigmoid,
    LeakyRelu(f64),
}

impl Activation {
    pub fn apply(&self, z: f64) -> f64 {
        match *self {
            Activation::Identity => z,
            Activation::Sigmoid => sigmoid(z),
            Activation::LeakyRelu(a) => leaky(z, a),
        }
    }

    /// Derivative evaluated at the pre-activation `z`.
    pub fn derivative(&self, z: f64) -> f64 {
        match *self {
            Activation::Identity => 1.0,
            Activation::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
            Activation::LeakyRelu(a) => leaky_slope(z, a),
        }
    }
}

#[inline]
fn leaky(x: f64, alpha: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        alpha * x
    }
}

// Slope 1 at exactly zero.
#[inline]
fn leaky_slope(x: f64, alpha: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        alpha
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn leaky_relu_forward(x: &Tensor, alpha: f64) -> Result<Tensor> {
    if !alpha.is_finite() {
        return Err(Error::arg(format!("leak constant must be finite, got {alpha}")));
    }
    Ok(x.map(|v| leaky(v, alpha)))
}

pub fn leaky_relu_backward(grad_out: &Tensor, x: &Tensor, alpha: f64) -> Result<Tensor> {
    grad_out.zip_map(x, |g, v| g * leaky_slope(v, alpha))
}

pub fn sigmoid_forward(x: &Tensor) -> Tensor {
    x.map(sigmoid)
}

/// Backward through sigmoid using its cached output `y`.
pub fn sigmoid_backward(grad_out: &Tensor, y: &Tensor) -> Result<Tensor> {
    grad_out.zip_map(y, |g, s| g * s * (1.0 - s))
}

/// Softmax over the last axis, independently for every leading index.
pub fn softmax_forward(x: &Tensor) -> Tensor {
    let k = *x.shape().last().unwrap();
    let mut out = x.data().to_vec();
    for row in out.chunks_exact_mut(k) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// `dx_i = y_i (g_i − Σ_j g_j y_j)` per row.
pub fn softmax_backward(grad_out: &Tensor, y: &Tensor) -> Result<Tensor> {
    grad_out.same_shape(y, "softmax backward")?;
    let k = *y.shape().last().unwrap();
    let mut out = vec![0.0; y.len()];
    for ((o, g), s) in out
        .chunks_exact_mut(k)
        .zip(grad_out.data().chunks_exact(k))
        .zip(y.data().chunks_exact(k))
    {
        let dot: f64 = g.iter().zip(s).map(|(a, b)| a * b).sum();
        for i in 0..k {
            o[i] = s[i] * (g[i] - dot);
        }
    }
    Ok(Tensor::from_parts(y.shape().to_vec(), out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn leaky_relu_examples() {
        let x = Tensor::new(vec![3], vec![2.0, -1.0, 0.0]).unwrap();
        let y = leaky_relu_forward(&x, DEFAULT_LEAK).unwrap();
        assert_eq!(y.data(), &[2.0, -5.5, 0.0]);
        let g = leaky_relu_backward(&Tensor::filled(vec![3], 1.0), &x, DEFAULT_LEAK).unwrap();
        assert_eq!(g.data(), &[1.0, 5.5, 1.0]);
        assert!(leaky_relu_forward(&x, f64::NAN).is_err());
    }

    #[test]
    fn sigmoid_and_softmax_examples() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        let u = softmax_forward(&Tensor::filled(vec![4], 3.0));
        assert!(u.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let big = softmax_forward(&Tensor::new(vec![2], vec![1000.0, 1000.0]).unwrap());
        assert_eq!(big.data(), &[0.5, 0.5]);
    }

    proptest! {
        #[test]
        fn softmax_normalized_and_shift_invariant(
            v in proptest::collection::vec(-30.0f64..30.0, 2..12),
            c in -100.0f64..100.0,
        ) {
            let x = Tensor::new(vec![v.len()], v.clone()).unwrap();
            let y = softmax_forward(&x);
            prop_assert!((y.sum() - 1.0).abs() <= 1e-12);
            prop_assert!(y.data().iter().all(|&p| p > 0.0));
            let ys = softmax_forward(&x.map(|e| e + c));
            for (a, b) in y.data().iter().zip(ys.data()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}
