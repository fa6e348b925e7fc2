//! Skip junctions: additive (residual) and channel concatenation.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn add_skip(deep: &Tensor, skip: &Tensor) -> Result<Tensor> {
    deep.same_shape(skip, "add_skip")?;
    deep.add(skip)
}

/// Both branches receive the upstream gradient unchanged.
pub fn add_skip_backward(grad_out: &Tensor) -> (Tensor, Tensor) {
    (grad_out.clone(), grad_out.clone())
}

/// Stacks `deep` channels first, then `skip` channels.
pub fn concat_skip(deep: &Tensor, skip: &Tensor) -> Result<Tensor> {
    let (n, h, w, cd) = deep.as_nhwc("concat_skip")?;
    let (ns, hs, ws, cs) = skip.as_nhwc("concat_skip")?;
    if (n, h, w) != (ns, hs, ws) || deep.rank() != skip.rank() {
        return Err(Error::shape(format!(
            "concat_skip needs equal batch/spatial dims, got {:?} and {:?}",
            deep.shape(),
            skip.shape()
        )));
    }
    let mut out = Vec::with_capacity(deep.len() + skip.len());
    for (a, b) in deep.data().chunks_exact(cd).zip(skip.data().chunks_exact(cs)) {
        out.extend_from_slice(a);
        out.extend_from_slice(b);
    }
    let mut shape = deep.shape().to_vec();
    *shape.last_mut().unwrap() = cd + cs;
    Ok(Tensor::from_parts(shape, out))
}

/// Splits the gradient back into the `deep` (first `deep_channels`) and `skip` slices.
pub fn concat_skip_backward(grad_out: &Tensor, deep_channels: usize) -> Result<(Tensor, Tensor)> {
    let c = *grad_out.shape().last().unwrap();
    if deep_channels == 0 || deep_channels >= c {
        return Err(Error::shape(format!(
            "cannot split {c} channels at {deep_channels}"
        )));
    }
    let mut gd = Vec::with_capacity(grad_out.len() / c * deep_channels);
    let mut gs = Vec::with_capacity(grad_out.len() / c * (c - deep_channels));
    for row in grad_out.data().chunks_exact(c) {
        gd.extend_from_slice(&row[..deep_channels]);
        gs.extend_from_slice(&row[deep_channels..]);
    }
    let mut sd = grad_out.shape().to_vec();
    let mut ss = sd.clone();
    *sd.last_mut().unwrap() = deep_channels;
    *ss.last_mut().unwrap() = c - deep_channels;
    Ok((Tensor::from_parts(sd, gd), Tensor::from_parts(ss, gs)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_with_zero_residual_is_identity() {
        let x = Tensor::from_fn(vec![3, 3, 2], |i| i as f64);
        let y = add_skip(&Tensor::zeros(vec![3, 3, 2]), &x).unwrap();
        assert_eq!(y, x);
        let g = Tensor::from_fn(vec![3, 3, 2], |i| -(i as f64));
        let (gd, gs) = add_skip_backward(&g);
        assert_eq!(gs, g);
        assert_eq!(gd, g);
        assert!(add_skip(&x, &Tensor::zeros(vec![3, 3, 1])).is_err());
    }

    #[test]
    fn concat_unet_shape_and_backward() {
        let a = Tensor::zeros(vec![39, 39, 32]);
        let b = Tensor::filled(vec![39, 39, 32], 1.0);
        let y = concat_skip(&a, &b).unwrap();
        assert_eq!(y.shape(), &[39, 39, 64]);
        assert_eq!(&y.data()[30..34], &[0.0, 0.0, 1.0, 1.0]);

        let (gd, gs) = concat_skip_backward(&Tensor::filled(vec![39, 39, 64], 1.0), 32).unwrap();
        assert_eq!(gd.shape(), &[39, 39, 32]);
        assert_eq!(gs.shape(), &[39, 39, 32]);
        assert!(gd.data().iter().chain(gs.data()).all(|&v| v == 1.0));

        assert!(concat_skip(&a, &Tensor::zeros(vec![38, 39, 32])).is_err());
    }
}
