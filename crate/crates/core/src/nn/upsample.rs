//! Nearest-neighbour upsampling by integer factors.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn upsample_forward(x: &Tensor, factors: (usize, usize)) -> Result<Tensor> {
    let (fy, fx) = factors;
    if fy == 0 || fx == 0 {
        return Err(Error::arg("upsample factors must be >= 1"));
    }
    let (n, h, w, c) = x.as_nhwc("upsample")?;
    let (oh, ow) = (h * fy, w * fx);
    let xs = x.data();
    let mut out = Vec::with_capacity(n * oh * ow * c);
    for b in 0..n {
        for y in 0..oh {
            for xq in 0..ow {
                let src = ((b * h + y / fy) * w + xq / fx) * c;
                out.extend_from_slice(&xs[src..src + c]);
            }
        }
    }
    let shape = if x.rank() == 3 {
        vec![oh, ow, c]
    } else {
        vec![n, oh, ow, c]
    };
    Ok(Tensor::from_parts(shape, out))
}

/// Sums the gradient over each replicated block.
pub fn upsample_backward(grad_out: &Tensor, input_shape: &[usize], factors: (usize, usize)) -> Result<Tensor> {
    let (fy, fx) = factors;
    let mut gx = Tensor::zeros(input_shape.to_vec());
    let (n, h, w, c) = gx.as_nhwc("upsample backward")?;
    let (_, gh, gw, gc) = grad_out.as_nhwc("upsample backward")?;
    if (gh, gw, gc) != (h * fy, w * fx, c) || grad_out.len() != gx.len() * fy * fx {
        return Err(Error::shape("upsample gradient does not match output"));
    }
    let gs = grad_out.data();
    let d = gx.data_mut();
    for b in 0..n {
        for y in 0..gh {
            for xq in 0..gw {
                let dst = ((b * h + y / fy) * w + xq / fx) * c;
                let src = ((b * gh + y) * gw + xq) * c;
                for k in 0..c {
                    d[dst + k] += gs[src + k];
                }
            }
        }
    }
    Ok(gx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unet_upsample_shapes() {
        let x = Tensor::zeros(vec![1, 27, 27, 1]);
        assert_eq!(upsample_forward(&x, (2, 2)).unwrap().shape(), &[1, 54, 54, 1]);
        let x = Tensor::zeros(vec![7, 7, 32]);
        assert_eq!(upsample_forward(&x, (6, 6)).unwrap().shape(), &[42, 42, 32]);
    }

    #[test]
    fn unit_factor_is_identity() {
        let x = Tensor::from_fn(vec![2, 3, 3, 2], |i| i as f64);
        assert_eq!(upsample_forward(&x, (1, 1)).unwrap(), x);
        assert!(upsample_forward(&x, (0, 1)).is_err());
    }

    #[test]
    fn backward_sums_blocks() {
        let x = Tensor::zeros(vec![2, 2, 1]);
        let g = Tensor::from_fn(vec![4, 6, 1], |i| i as f64);
        let gx = upsample_backward(&g, x.shape(), (2, 3)).unwrap();
        // block (0,0): rows 0..2, cols 0..3 -> 0+1+2+6+7+8
        assert_eq!(gx.data()[0], 24.0);
        assert_eq!(gx.sum(), g.sum());
    }
}
