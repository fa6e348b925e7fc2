//! Valid 2D cross-correlation over NHWC batches.
//!
//! `y[b, i, j, o] = bias[o] + Σ_{n, m, c} w[n, m, c, o] · x[b, i + n, j + m, c]`
//!
//! No kernel flip is applied. Weight gradients accumulate over every output position,
//! which is how the shared filter weights receive one combined update.

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvDims {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub out_c: usize,
}

impl ConvDims {
    pub fn out_h(&self) -> usize {
        self.in_h - self.kh + 1
    }

    pub fn out_w(&self) -> usize {
        self.in_w - self.kw + 1
    }

    fn resolve(x: &Tensor, weights: &Tensor) -> Result<Self> {
        let (batch, in_h, in_w, in_c) = x.as_nhwc("conv2d input")?;
        let &[kh, kw, wc, out_c] = weights.shape() else {
            return Err(Error::shape(format!(
                "conv2d weights must be [kh, kw, c_in, c_out], got {:?}",
                weights.shape()
            )));
        };
        if wc != in_c {
            return Err(Error::shape(format!(
                "conv2d weights expect {wc} input channels, input has {in_c}"
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::arg(format!("conv2d kernel {kh}x{kw} must be odd")));
        }
        if kh > in_h || kw > in_w {
            return Err(Error::shape(format!(
                "conv2d kernel {kh}x{kw} larger than input {in_h}x{in_w}"
            )));
        }
        Ok(ConvDims {
            batch,
            in_h,
            in_w,
            in_c,
            kh,
            kw,
            out_c,
        })
    }

    fn out_shape(&self, rank: usize) -> Vec<usize> {
        if rank == 3 {
            vec![self.out_h(), self.out_w(), self.out_c]
        } else {
            vec![self.batch, self.out_h(), self.out_w(), self.out_c]
        }
    }
}

pub fn conv2d_forward(x: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let d = ConvDims::resolve(x, weights)?;
    if bias.shape() != [d.out_c] {
        return Err(Error::shape(format!(
            "conv2d bias must be [{}], got {:?}",
            d.out_c,
            bias.shape()
        )));
    }
    let (oh, ow) = (d.out_h(), d.out_w());
    let (xs, ws, bs) = (x.data(), weights.data(), bias.data());
    let mut out = vec![0.0; d.batch * oh * ow * d.out_c];

    par::for_each_chunk(&mut out, ow * d.out_c, |row, chunk| {
        let (b, i) = (row / oh, row % oh);
        for j in 0..ow {
            let acc = &mut chunk[j * d.out_c..(j + 1) * d.out_c];
            acc.copy_from_slice(bs);
            for n in 0..d.kh {
                for m in 0..d.kw {
                    let xo = ((b * d.in_h + i + n) * d.in_w + j + m) * d.in_c;
                    for c in 0..d.in_c {
                        let xv = xs[xo + c];
                        let wo = ((n * d.kw + m) * d.in_c + c) * d.out_c;
                        for (a, &wv) in acc.iter_mut().zip(&ws[wo..wo + d.out_c]) {
                            *a += wv * xv;
                        }
                    }
                }
            }
        }
    });
    Ok(Tensor::from_parts(d.out_shape(x.rank()), out))
}

#[derive(Clone, Debug)]
pub struct Conv2dGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

/// Gradients of a [`conv2d_forward`] call given the upstream gradient.
pub fn conv2d_backward(grad_out: &Tensor, x: &Tensor, weights: &Tensor) -> Result<Conv2dGrads> {
    let d = ConvDims::resolve(x, weights)?;
    if grad_out.shape() != d.out_shape(x.rank()).as_slice() {
        return Err(Error::shape(format!(
            "conv2d grad {:?} does not match output {:?}",
            grad_out.shape(),
            d.out_shape(x.rank())
        )));
    }
    let (oh, ow, co, ci) = (d.out_h(), d.out_w(), d.out_c, d.in_c);
    let (gs, xs, ws) = (grad_out.data(), x.data(), weights.data());

    let mut gb = vec![0.0; co];
    for g in gs.chunks_exact(co) {
        for (acc, &v) in gb.iter_mut().zip(g) {
            *acc += v;
        }
    }

    let mut gw = vec![0.0; d.kh * d.kw * ci * co];
    par::for_each_chunk(&mut gw, co, |idx, acc| {
        let c = idx % ci;
        let m = (idx / ci) % d.kw;
        let n = idx / (ci * d.kw);
        for b in 0..d.batch {
            for i in 0..oh {
                for j in 0..ow {
                    let xv = xs[((b * d.in_h + i + n) * d.in_w + j + m) * ci + c];
                    let go = ((b * oh + i) * ow + j) * co;
                    for (a, &g) in acc.iter_mut().zip(&gs[go..go + co]) {
                        *a += g * xv;
                    }
                }
            }
        }
    });

    let mut gx = vec![0.0; xs.len()];
    par::for_each_chunk(&mut gx, d.in_w * ci, |row, chunk| {
        let (b, y) = (row / d.in_h, row % d.in_h);
        for xq in 0..d.in_w {
            let acc = &mut chunk[xq * ci..(xq + 1) * ci];
            for n in 0..d.kh {
                if y < n || y - n >= oh {
                    continue;
                }
                let i = y - n;
                for m in 0..d.kw {
                    if xq < m || xq - m >= ow {
                        continue;
                    }
                    let j = xq - m;
                    let go = ((b * oh + i) * ow + j) * co;
                    let g = &gs[go..go + co];
                    for (c, a) in acc.iter_mut().enumerate() {
                        let wo = ((n * d.kw + m) * ci + c) * co;
                        let mut s = 0.0;
                        for (&wv, &gv) in ws[wo..wo + co].iter().zip(g) {
                            s += wv * gv;
                        }
                        *a += s;
                    }
                }
            }
        }
    });

    Ok(Conv2dGrads {
        input: Tensor::from_parts(x.shape().to_vec(), gx),
        weights: Tensor::from_parts(weights.shape().to_vec(), gw),
        bias: Tensor::from_parts(vec![co], gb),
    })
}

/// `kh·kw·c_in·c_out + c_out`.
pub fn conv2d_param_count(kh: usize, kw: usize, c_in: usize, c_out: usize) -> usize {
    kh * kw * c_in * c_out + c_out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn delta3(c: usize) -> Tensor {
        let mut w = Tensor::zeros(vec![3, 3, c, c]);
        for k in 0..c {
            w.data_mut()[((3 + 1) * c + k) * c + k] = 1.0;
        }
        w
    }

    #[test]
    fn delta_kernel_keeps_valid_window() {
        let x = Tensor::from_fn(vec![5, 5, 1], |i| i as f64 * 0.5 - 3.0);
        let y = conv2d_forward(&x, &delta3(1), &Tensor::zeros(vec![1])).unwrap();
        assert_eq!(y.shape(), &[3, 3, 1]);
        assert_eq!(y, x.center_crop((3, 3)).unwrap());
    }

    #[test]
    fn ones_kernel_sums_window() {
        let x = Tensor::filled(vec![4, 4, 1], 2.0);
        let y = conv2d_forward(&x, &Tensor::filled(vec![3, 3, 1, 1], 1.0), &Tensor::zeros(vec![1]))
            .unwrap();
        assert_eq!(y.shape(), &[2, 2, 1]);
        assert!(y.data().iter().all(|&v| v == 18.0));
    }

    #[test]
    fn first_unet_layer_shape_and_params() {
        let x = Tensor::zeros(vec![1, 54, 54, 1]);
        let y = conv2d_forward(&x, &Tensor::zeros(vec![3, 3, 1, 8]), &Tensor::zeros(vec![8])).unwrap();
        assert_eq!(y.shape(), &[1, 52, 52, 8]);
        assert_eq!(conv2d_param_count(3, 3, 1, 8), 80);
    }

    #[test]
    fn backward_edge_cases() {
        let x = Tensor::from_fn(vec![2, 6, 6, 2], |i| (i as f64).sin());
        let w = Tensor::from_fn(vec![3, 3, 2, 3], |i| (i as f64).cos());
        let g = conv2d_backward(&Tensor::zeros(vec![2, 4, 4, 3]), &x, &w).unwrap();
        assert!(g.input.data().iter().chain(g.weights.data()).chain(g.bias.data()).all(|&v| v == 0.0));

        let x = Tensor::new(vec![1, 1, 1], vec![3.0]).unwrap();
        let w = Tensor::new(vec![1, 1, 1, 1], vec![0.7]).unwrap();
        let go = Tensor::new(vec![1, 1, 1], vec![-2.0]).unwrap();
        let g = conv2d_backward(&go, &x, &w).unwrap();
        assert_eq!(g.weights.data(), &[-6.0]);
        assert_eq!(g.bias.data(), &[-2.0]);
        assert_eq!(g.input.data(), &[-2.0 * 0.7]);
    }

    #[test]
    fn rejects_bad_kernels() {
        let x = Tensor::zeros(vec![2, 2, 1]);
        assert!(conv2d_forward(&x, &Tensor::zeros(vec![3, 3, 1, 1]), &Tensor::zeros(vec![1])).is_err());
        let x = Tensor::zeros(vec![4, 4, 1]);
        assert!(conv2d_forward(&x, &Tensor::zeros(vec![2, 2, 1, 1]), &Tensor::zeros(vec![1])).is_err());
        assert!(conv2d_forward(&x, &Tensor::zeros(vec![3, 3, 2, 1]), &Tensor::zeros(vec![1])).is_err());
        let bad_grad = Tensor::zeros(vec![3, 3, 1]);
        assert!(conv2d_backward(&bad_grad, &x, &Tensor::zeros(vec![3, 3, 1, 1])).is_err());
    }
}
