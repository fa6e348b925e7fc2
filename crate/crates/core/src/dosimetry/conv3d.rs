//! 3D convolution of a decay map with a dose-voxel kernel.
//!
//! `D[v] = Σ_k A[v + ẑ − k] · S[k]`, where `ẑ` is the kernel centre and voxels outside
//! the map hold no activity. The output has the map's dims.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvMethod {
    Direct,
    Fft,
}

impl std::str::FromStr for ConvMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(ConvMethod::Direct),
            "fft" => Ok(ConvMethod::Fft),
            _ => Err(Error::arg(format!("unknown convolution method '{s}' (direct|fft)"))),
        }
    }
}

fn dims3(x: &Tensor, what: &str) -> Result<[usize; 3]> {
    match *x.shape() {
        [a, b, c] => Ok([a, b, c]),
        _ => Err(Error::shape(format!("{what} must be rank 3, got {:?}", x.shape()))),
    }
}

fn check(decays: &Tensor, kernel: &Tensor) -> Result<([usize; 3], [usize; 3])> {
    let n = dims3(decays, "decay map")?;
    let k = dims3(kernel, "kernel")?;
    if k.iter().any(|d| d % 2 == 0) {
        return Err(Error::arg(format!("kernel dims {k:?} must be odd")));
    }
    Ok((n, k))
}

pub fn convolve3d(decays: &Tensor, kernel: &Tensor, method: ConvMethod) -> Result<Tensor> {
    match method {
        ConvMethod::Direct => convolve3d_direct(decays, kernel),
        ConvMethod::Fft => convolve3d_fft(decays, kernel),
    }
}

/// Direct summation, parallel over output slices along the first axis.
/// Within a voxel, kernel indices are visited in row-major order.
pub fn convolve3d_direct(decays: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (n, k) = check(decays, kernel)?;
    let c = [k[0] / 2, k[1] / 2, k[2] / 2];
    let a = decays.data();
    let s = kernel.data();
    let mut out = vec![0.0; a.len()];
    par::for_each_chunk(&mut out, n[1] * n[2], |x, slab| {
        for y in 0..n[1] {
            for z in 0..n[2] {
                let mut acc = 0.0;
                for i in 0..k[0] {
                    // u = v + ẑ − k, skipped when outside the map
                    let Some(ux) = (x + c[0]).checked_sub(i).filter(|&u| u < n[0]) else {
                        continue;
                    };
                    for j in 0..k[1] {
                        let Some(uy) = (y + c[1]).checked_sub(j).filter(|&u| u < n[1]) else {
                            continue;
                        };
                        for l in 0..k[2] {
                            let Some(uz) = (z + c[2]).checked_sub(l).filter(|&u| u < n[2]) else {
                                continue;
                            };
                            acc += a[(ux * n[1] + uy) * n[2] + uz] * s[(i * k[1] + j) * k[2] + l];
                        }
                    }
                }
                slab[y * n[2] + z] = acc;
            }
        }
    });
    Tensor::new(n.to_vec(), out)
}

/// In-place FFT along one axis of a row-major 3D complex buffer.
fn fft_axis(buf: &mut [Complex64], dims: [usize; 3], axis: usize, fft: &Arc<dyn Fft<f64>>) {
    let len = dims[axis];
    let stride: usize = dims[axis + 1..].iter().product();
    let mut line = vec![Complex64::default(); len];
    let mut scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
    let outer: usize = dims[..axis].iter().product();
    for o in 0..outer {
        for inner in 0..stride {
            let base = o * len * stride + inner;
            for (t, v) in line.iter_mut().enumerate() {
                *v = buf[base + t * stride];
            }
            fft.process_with_scratch(&mut line, &mut scratch);
            for (t, v) in line.iter().enumerate() {
                buf[base + t * stride] = *v;
            }
        }
    }
}

fn fft3(buf: &mut [Complex64], dims: [usize; 3], planner: &mut FftPlanner<f64>, inverse: bool) {
    for axis in 0..3 {
        let fft = if inverse {
            planner.plan_fft_inverse(dims[axis])
        } else {
            planner.plan_fft_forward(dims[axis])
        };
        fft_axis(buf, dims, axis, &fft);
    }
}

/// Frequency-domain convolution: both operands zero-padded to `n + k − 1` per axis,
/// so the circular product equals the full linear convolution.
pub fn convolve3d_fft(decays: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (n, k) = check(decays, kernel)?;
    let p = [n[0] + k[0] - 1, n[1] + k[1] - 1, n[2] + k[2] - 1];
    let total = p[0] * p[1] * p[2];
    let embed = |src: &[f64], d: [usize; 3]| {
        let mut buf = vec![Complex64::default(); total];
        for x in 0..d[0] {
            for y in 0..d[1] {
                for z in 0..d[2] {
                    buf[(x * p[1] + y) * p[2] + z].re = src[(x * d[1] + y) * d[2] + z];
                }
            }
        }
        buf
    };
    let mut fa = embed(decays.data(), n);
    let mut fs = embed(kernel.data(), k);
    let mut planner = FftPlanner::new();
    fft3(&mut fa, p, &mut planner, false);
    fft3(&mut fs, p, &mut planner, false);
    for (a, s) in fa.iter_mut().zip(&fs) {
        *a *= s;
    }
    fft3(&mut fa, p, &mut planner, true);
    let scale = 1.0 / total as f64;
    let c = [k[0] / 2, k[1] / 2, k[2] / 2];
    let mut out = Vec::with_capacity(n[0] * n[1] * n[2]);
    for x in 0..n[0] {
        for y in 0..n[1] {
            for z in 0..n[2] {
                out.push(fa[((x + c[0]) * p[1] + y + c[1]) * p[2] + z + c[2]].re * scale);
            }
        }
    }
    Tensor::new(n.to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn delta(d: usize) -> Tensor {
        let mut t = Tensor::zeros(vec![d, d, d]);
        let c = d / 2;
        t.data_mut()[(c * d + c) * d + c] = 1.0;
        t
    }

    fn kernel() -> Tensor {
        Tensor::from_fn(vec![9, 9, 9], |i| 1.0 / (1.0 + (i % 37) as f64))
    }

    #[test]
    fn delta_map_reproduces_kernel() {
        for method in [ConvMethod::Direct, ConvMethod::Fft] {
            let d = convolve3d(&delta(9), &kernel(), method).unwrap();
            for (a, b) in d.data().iter().zip(kernel().data()) {
                assert!((a - b).abs() <= 1e-14 * b.abs(), "{method:?}");
            }
        }
    }

    #[test]
    fn delta_kernel_is_identity() {
        let m = Tensor::from_fn(vec![6, 7, 5], |i| (i * 13 % 17) as f64);
        assert_eq!(convolve3d_direct(&m, &delta(9)).unwrap(), m);
    }

    #[test]
    fn uniform_interior_sums_kernel() {
        let m = Tensor::filled(vec![12, 12, 12], 3.0);
        let d = convolve3d_direct(&m, &kernel()).unwrap();
        let s: f64 = kernel().sum();
        let v = d.data()[(6 * 12 + 6) * 12 + 6];
        assert!((v - 3.0 * s).abs() < 1e-12 * v);
    }

    #[test]
    fn zero_map_and_even_kernel() {
        let z = convolve3d_fft(&Tensor::zeros(vec![5, 5, 5]), &kernel()).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert!(convolve3d_direct(&Tensor::zeros(vec![5, 5, 5]), &Tensor::zeros(vec![4, 3, 3])).is_err());
    }
}
