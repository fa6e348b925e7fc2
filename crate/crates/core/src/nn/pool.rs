//! Average and max pooling over the spatial axes of NHWC batches.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeometry {
    pub pool: (usize, usize),
    pub stride: (usize, usize),
}

impl PoolGeometry {
    pub fn new(pool: (usize, usize), stride: (usize, usize)) -> Result<Self> {
        if pool.0 == 0 || pool.1 == 0 || stride.0 == 0 || stride.1 == 0 {
            return Err(Error::arg("pool and stride must be positive"));
        }
        Ok(PoolGeometry { pool, stride })
    }

    /// Output spatial size; the window must tile the input exactly.
    pub fn output(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let axis = |n: usize, p: usize, s: usize| -> Result<usize> {
            if n < p || !(n - p).is_multiple_of(s) {
                return Err(Error::shape(format!(
                    "pool {p} stride {s} does not tile an axis of {n}"
                )));
            }
            Ok((n - p) / s + 1)
        };
        Ok((axis(h, self.pool.0, self.stride.0)?, axis(w, self.pool.1, self.stride.1)?))
    }
}

fn out_shape(x: &Tensor, oh: usize, ow: usize) -> Vec<usize> {
    let s = x.shape();
    if s.len() == 3 {
        vec![oh, ow, s[2]]
    } else {
        vec![s[0], oh, ow, s[3]]
    }
}

pub fn avgpool_forward(x: &Tensor, geo: PoolGeometry) -> Result<Tensor> {
    let (n, h, w, c) = x.as_nhwc("avgpool")?;
    let (oh, ow) = geo.output(h, w)?;
    let area = (geo.pool.0 * geo.pool.1) as f64;
    let xs = x.data();
    let mut out = Vec::with_capacity(n * oh * ow * c);
    for b in 0..n {
        for i in 0..oh {
            for j in 0..ow {
                for k in 0..c {
                    let mut s = 0.0;
                    for u in 0..geo.pool.0 {
                        for v in 0..geo.pool.1 {
                            let (y, xq) = (i * geo.stride.0 + u, j * geo.stride.1 + v);
                            s += xs[((b * h + y) * w + xq) * c + k];
                        }
                    }
                    out.push(s / area);
                }
            }
        }
    }
    Ok(Tensor::from_parts(out_shape(x, oh, ow), out))
}

/// Spreads each output gradient uniformly over its window.
pub fn avgpool_backward(grad_out: &Tensor, input_shape: &[usize], geo: PoolGeometry) -> Result<Tensor> {
    let mut gx = Tensor::zeros(input_shape.to_vec());
    let (n, h, w, c) = gx.as_nhwc("avgpool backward")?;
    let (oh, ow) = geo.output(h, w)?;
    if grad_out.shape() != out_shape(&gx, oh, ow).as_slice() {
        return Err(Error::shape("avgpool gradient does not match output"));
    }
    let area = (geo.pool.0 * geo.pool.1) as f64;
    let gs = grad_out.data();
    let d = gx.data_mut();
    for b in 0..n {
        for i in 0..oh {
            for j in 0..ow {
                for k in 0..c {
                    let g = gs[((b * oh + i) * ow + j) * c + k] / area;
                    for u in 0..geo.pool.0 {
                        for v in 0..geo.pool.1 {
                            let (y, xq) = (i * geo.stride.0 + u, j * geo.stride.1 + v);
                            d[((b * h + y) * w + xq) * c + k] += g;
                        }
                    }
                }
            }
        }
    }
    Ok(gx)
}

/// Max pooling; also returns the flat input index chosen for every output entry.
/// Ties go to the first occurrence in row-major window order.
pub fn maxpool_forward(x: &Tensor, geo: PoolGeometry) -> Result<(Tensor, Vec<usize>)> {
    let (n, h, w, c) = x.as_nhwc("maxpool")?;
    let (oh, ow) = geo.output(h, w)?;
    let xs = x.data();
    let mut out = Vec::with_capacity(n * oh * ow * c);
    let mut arg = Vec::with_capacity(out.capacity());
    for b in 0..n {
        for i in 0..oh {
            for j in 0..ow {
                for k in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = usize::MAX;
                    for u in 0..geo.pool.0 {
                        for v in 0..geo.pool.1 {
                            let (y, xq) = (i * geo.stride.0 + u, j * geo.stride.1 + v);
                            let idx = ((b * h + y) * w + xq) * c + k;
                            if xs[idx] > best {
                                best = xs[idx];
                                at = idx;
                            }
                        }
                    }
                    out.push(best);
                    arg.push(at);
                }
            }
        }
    }
    Ok((Tensor::from_parts(out_shape(x, oh, ow), out), arg))
}

pub fn maxpool_backward(grad_out: &Tensor, input_shape: &[usize], argmax: &[usize]) -> Result<Tensor> {
    if grad_out.len() != argmax.len() {
        return Err(Error::shape("maxpool gradient does not match cached argmax"));
    }
    let mut gx = Tensor::zeros(input_shape.to_vec());
    let d = gx.data_mut();
    for (&g, &i) in grad_out.data().iter().zip(argmax) {
        d[i] += g;
    }
    Ok(gx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_by_two() -> PoolGeometry {
        PoolGeometry::new((2, 2), (2, 2)).unwrap()
    }

    #[test]
    fn unet_pool_shape() {
        let x = Tensor::zeros(vec![1, 42, 42, 32]);
        assert_eq!(avgpool_forward(&x, two_by_two()).unwrap().shape(), &[1, 21, 21, 32]);
        // A 3x3 window cannot reproduce 42 -> 21.
        let g3 = PoolGeometry::new((3, 3), (2, 2)).unwrap();
        assert!(g3.output(42, 42).is_err());
    }

    #[test]
    fn maxpool_routes_to_argmax() {
        let x = Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, arg) = maxpool_forward(&x, two_by_two()).unwrap();
        assert_eq!(y.data(), &[4.0]);
        let g = maxpool_backward(&Tensor::filled(vec![1, 1, 1], 1.0), x.shape(), &arg).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 0.0, 1.0]);

        let ties = Tensor::filled(vec![2, 2, 1], 1.0);
        let (_, arg) = maxpool_forward(&ties, two_by_two()).unwrap();
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn avgpool_of_constant_is_constant() {
        let x = Tensor::filled(vec![2, 6, 4, 3], -1.25);
        let y = avgpool_forward(&x, two_by_two()).unwrap();
        assert!(y.data().iter().all(|&v| v == -1.25));
        let g = avgpool_backward(&Tensor::filled(y.shape().to_vec(), 4.0), x.shape(), two_by_two()).unwrap();
        assert!(g.data().iter().all(|&v| v == 1.0));
    }
}
