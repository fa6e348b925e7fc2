//! Fully connected layer `y = h(W·x + b)` on `[n, in]` batches (or a single `[in]` vector).

use crate::error::{Error, Result};
use crate::nn::activation::Activation;
use crate::tensor::Tensor;

fn dims(x: &Tensor, weights: &Tensor) -> Result<(usize, usize, usize)> {
    let (n, inp) = match *x.shape() {
        [i] => (1, i),
        [n, i] => (n, i),
        _ => return Err(Error::shape(format!("dense input must be rank 1 or 2, got {:?}", x.shape()))),
    };
    let &[units, wi] = weights.shape() else {
        return Err(Error::shape("dense weights must be [units, inputs]"));
    };
    if wi != inp {
        return Err(Error::shape(format!("dense weights take {wi} inputs, got {inp}")));
    }
    Ok((n, inp, units))
}

fn out_shape(x: &Tensor, n: usize, units: usize) -> Vec<usize> {
    if x.rank() == 1 {
        vec![units]
    } else {
        vec![n, units]
    }
}

/// Returns `(y, z)` where `z` is the pre-activation.
pub fn dense_forward(x: &Tensor, weights: &Tensor, bias: &Tensor, act: Activation) -> Result<(Tensor, Tensor)> {
    let (n, inp, units) = dims(x, weights)?;
    if bias.shape() != [units] {
        return Err(Error::shape(format!("dense bias must be [{units}]")));
    }
    let w = weights.data();
    let mut z = Vec::with_capacity(n * units);
    for row in x.data().chunks_exact(inp) {
        for j in 0..units {
            let wr = &w[j * inp..(j + 1) * inp];
            let mut s = bias.data()[j];
            for (a, b) in wr.iter().zip(row) {
                s += a * b;
            }
            z.push(s);
        }
    }
    let shape = out_shape(x, n, units);
    let y: Vec<f64> = z.iter().map(|&v| act.apply(v)).collect();
    Ok((Tensor::from_parts(shape.clone(), y), Tensor::from_parts(shape, z)))
}

#[derive(Clone, Debug)]
pub struct DenseGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

/// `δ = ∂L/∂y ⊙ h′(z)`, then `∂W = δ·xᵀ`, `∂b = δ`, `∂x = Wᵀ·δ`, summed over the batch.
pub fn dense_backward(
    grad_out: &Tensor,
    x: &Tensor,
    z: &Tensor,
    weights: &Tensor,
    act: Activation,
) -> Result<DenseGrads> {
    let (n, inp, units) = dims(x, weights)?;
    grad_out.same_shape(z, "dense backward")?;
    if z.len() != n * units {
        return Err(Error::shape("dense cache does not match input"));
    }
    let delta: Vec<f64> = grad_out
        .data()
        .iter()
        .zip(z.data())
        .map(|(g, &v)| g * act.derivative(v))
        .collect();
    let w = weights.data();
    let mut gw = vec![0.0; units * inp];
    let mut gb = vec![0.0; units];
    let mut gx = vec![0.0; n * inp];
    for ((d, xr), gxr) in delta
        .chunks_exact(units)
        .zip(x.data().chunks_exact(inp))
        .zip(gx.chunks_exact_mut(inp))
    {
        for j in 0..units {
            gb[j] += d[j];
            for i in 0..inp {
                gw[j * inp + i] += d[j] * xr[i];
                gxr[i] += w[j * inp + i] * d[j];
            }
        }
    }
    Ok(DenseGrads {
        input: Tensor::from_parts(x.shape().to_vec(), gx),
        weights: Tensor::from_parts(vec![units, inp], gw),
        bias: Tensor::from_parts(vec![units], gb),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_product() {
        let w = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let x = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        let (y, _) = dense_forward(&x, &w, &Tensor::zeros(vec![1]), Activation::Identity).unwrap();
        assert_eq!(y.data(), &[11.0]);
    }

    #[test]
    fn zero_weights_zero_preactivation() {
        let x = Tensor::from_fn(vec![4, 3], |i| i as f64 * 1.7 - 3.0);
        let (_, z) = dense_forward(&x, &Tensor::zeros(vec![5, 3]), &Tensor::zeros(vec![5]), Activation::Sigmoid).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mismatched_inputs_rejected() {
        let x = Tensor::zeros(vec![2, 3]);
        assert!(dense_forward(&x, &Tensor::zeros(vec![2, 4]), &Tensor::zeros(vec![2]), Activation::Identity).is_err());
    }
}
