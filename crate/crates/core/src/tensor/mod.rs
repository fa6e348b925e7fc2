//! Dense row-major `f64` tensors of rank 1 to 4.

mod io;
mod quad;

pub use io::{read_tensor, read_tensor_from, write_tensor, write_tensor_to, DVKT_MAGIC, DVKT_VERSION};
pub use quad::quad_convolve;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(Error::Rank(shape.len()));
    }
    if shape.contains(&0) {
        return Err(Error::shape(format!("zero-sized dimension in {shape:?}")));
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::shape(format!("element count of {shape:?} overflows")))
}

impl Tensor {
    /// Builds a tensor, rejecting bad shapes, length mismatches and non-finite data.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let n = check_shape(&shape)?;
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {n} entries, got {}",
                data.len()
            )));
        }
        let t = Tensor { shape, data };
        t.ensure_finite("Tensor::new")?;
        Ok(t)
    }

    /// Zero tensor. Panics on an invalid shape; use with shapes known to be valid.
    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = check_shape(&shape).expect("invalid tensor shape");
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f64) -> Self {
        let shape = shape.into();
        let n = check_shape(&shape).expect("invalid tensor shape");
        Tensor {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Internal constructor for kernels that already guarantee the length.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(check_shape(&shape).ok(), Some(data.len()));
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::NonFinite(format!(
                "{what}: entry {i} is {}",
                self.data[i]
            ))),
            None => Ok(()),
        }
    }

    pub fn same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// Row-major reinterpretation with a new shape of equal size.
    pub fn reshape(&self, new_shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        let new_shape = new_shape.into();
        let n = check_shape(&new_shape)?;
        if n != self.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} ({} entries) into {new_shape:?} ({n} entries)",
                self.shape,
                self.len()
            )));
        }
        Ok(Tensor {
            shape: new_shape,
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(other, "zip_map")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    /// Left-to-right sum.
    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Slice of the leading axis, e.g. one sample of a batch.
    pub fn outer(&self, index: usize) -> Tensor {
        assert!(self.rank() >= 2, "outer() needs rank >= 2");
        let inner: usize = self.shape[1..].iter().product();
        Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[index * inner..(index + 1) * inner].to_vec(),
        }
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::arg("cannot stack an empty list"))?;
        let mut shape = vec![items.len()];
        shape.extend_from_slice(first.shape());
        check_shape(&shape)?;
        let mut data = Vec::with_capacity(items.len() * first.len());
        for t in items {
            first.same_shape(t, "stack")?;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor { shape, data })
    }

    /// Centered spatial window of a `[h, w, c]` or `[n, h, w, c]` tensor.
    ///
    /// With an odd excess, `floor(excess / 2)` rows/columns go from the low side and the
    /// rest from the high side.
    pub fn center_crop(&self, target: (usize, usize)) -> Result<Tensor> {
        let (n, h, w, c) = self.as_nhwc("center_crop")?;
        let (th, tw) = target;
        if th == 0 || tw == 0 || th > h || tw > w {
            return Err(Error::shape(format!(
                "crop target {target:?} does not fit in {h}x{w}"
            )));
        }
        let (oy, ox) = crop_offsets((h, w), target);
        let mut data = Vec::with_capacity(n * th * tw * c);
        for b in 0..n {
            for y in 0..th {
                let row = ((b * h + y + oy) * w + ox) * c;
                data.extend_from_slice(&self.data[row..row + tw * c]);
            }
        }
        let shape = if self.rank() == 3 {
            vec![th, tw, c]
        } else {
            vec![n, th, tw, c]
        };
        Ok(Tensor { shape, data })
    }

    /// Views a rank-3 `[h, w, c]` or rank-4 `[n, h, w, c]` tensor as NHWC dims.
    pub(crate) fn as_nhwc(&self, what: &str) -> Result<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [h, w, c] => Ok((1, h, w, c)),
            [n, h, w, c] => Ok((n, h, w, c)),
            _ => Err(Error::shape(format!(
                "{what} expects [h, w, c] or [n, h, w, c], got {:?}",
                self.shape
            ))),
        }
    }
}

/// Low-side offsets used by [`Tensor::center_crop`].
pub fn crop_offsets(source: (usize, usize), target: (usize, usize)) -> (usize, usize) {
    ((source.0 - target.0) / 2, (source.1 - target.1) / 2)
}

/// Parameters of a min-max map `[data_min, data_max] -> [low, high]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationParams {
    pub data_min: f64,
    pub data_max: f64,
    pub low: f64,
    pub high: f64,
}

impl NormalizationParams {
    pub fn new(data_min: f64, data_max: f64, low: f64, high: f64) -> Result<Self> {
        if !(data_min.is_finite() && data_max.is_finite() && low.is_finite() && high.is_finite()) {
            return Err(Error::NonFinite("normalization parameters".into()));
        }
        if low >= high {
            return Err(Error::arg(format!(
                "normalization interval [{low}, {high}] is empty"
            )));
        }
        if data_min >= data_max {
            return Err(Error::Degenerate(format!(
                "data range [{data_min}, {data_max}] has no extent"
            )));
        }
        Ok(NormalizationParams {
            data_min,
            data_max,
            low,
            high,
        })
    }

    /// Fits the data range of every tensor in `items` jointly.
    pub fn fit<'a>(items: impl IntoIterator<Item = &'a Tensor>, low: f64, high: f64) -> Result<Self> {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for t in items {
            lo = lo.min(t.min());
            hi = hi.max(t.max());
        }
        if lo > hi {
            return Err(Error::arg("cannot fit normalization on no data"));
        }
        Self::new(lo, hi, low, high)
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        let span = self.data_max - self.data_min;
        let width = self.high - self.low;
        let mut out = x.map(|v| width * ((v - self.data_min) / span) + self.low);
        // Pin the endpoints so min/max land exactly on the interval bounds.
        for (o, &v) in out.data.iter_mut().zip(&x.data) {
            if v == self.data_min {
                *o = self.low;
            } else if v == self.data_max {
                *o = self.high;
            }
        }
        out
    }

    pub fn invert(&self, y: &Tensor) -> Tensor {
        let span = self.data_max - self.data_min;
        let width = self.high - self.low;
        y.map(|v| (v - self.low) / width * span + self.data_min)
    }
}

/// Min-max normalization of `x` onto `[a, b]`.
pub fn minmax_normalize(x: &Tensor, a: f64, b: f64) -> Result<(Tensor, NormalizationParams)> {
    let p = NormalizationParams::new(x.min(), x.max(), a, b)?;
    Ok((p.apply(x), p))
}

pub fn denormalize(y: &Tensor, p: &NormalizationParams) -> Result<Tensor> {
    let out = p.invert(y);
    out.ensure_finite("denormalize")?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t1(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(matches!(Tensor::new(vec![2, 2], vec![1.0; 3]), Err(Error::Shape(_))));
        assert!(matches!(Tensor::new(vec![1; 5], vec![1.0]), Err(Error::Rank(5))));
        assert!(matches!(
            Tensor::new(vec![2], vec![1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn minmax_examples() {
        let (y, _) = minmax_normalize(&t1(&[0.0, 5.0, 10.0]), 0.1, 0.9).unwrap();
        assert_eq!(y.data(), &[0.1, 0.5, 0.9]);
        let (y, _) = minmax_normalize(&t1(&[2.0, 4.0]), 0.0, 1.0).unwrap();
        assert_eq!(y.data(), &[0.0, 1.0]);
        assert!(matches!(
            minmax_normalize(&t1(&[7.0, 7.0, 7.0]), 0.1, 0.9),
            Err(Error::Degenerate(_))
        ));
        assert!(matches!(
            minmax_normalize(&t1(&[1.0, 2.0]), 0.9, 0.1),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn denormalize_examples() {
        let (_, p) = minmax_normalize(&t1(&[2.0, 4.0]), 0.1, 0.9).unwrap();
        let x = denormalize(&t1(&[0.1, 0.9]), &p).unwrap();
        assert!((x.data()[0] - 2.0).abs() < 1e-15 && (x.data()[1] - 4.0).abs() < 1e-15);

        let p = NormalizationParams::new(0.0, 10.0, 0.1, 0.9).unwrap();
        let x = denormalize(&t1(&[0.5]), &p).unwrap();
        assert!((x.data()[0] - 5.0).abs() < 1e-14);
    }

    #[test]
    fn reshape_examples() {
        let x = Tensor::from_fn(vec![9, 9, 9], |i| i as f64);
        let y = x.reshape(vec![27, 27, 1]).unwrap();
        assert_eq!(y.shape(), &[27, 27, 1]);
        assert_eq!(y.data(), x.data());
        assert_eq!(y.reshape(vec![9, 9, 9]).unwrap(), x);
        let z = Tensor::zeros(vec![2, 3]);
        assert!(matches!(z.reshape(vec![4, 2]), Err(Error::Shape(_))));
    }

    #[test]
    fn center_crop_examples() {
        let x = Tensor::from_fn(vec![42, 42, 32], |i| i as f64);
        let y = x.center_crop((39, 39)).unwrap();
        assert_eq!(y.shape(), &[39, 39, 32]);
        // Excess 3: one row/column dropped low, two high.
        assert_eq!(y.data()[0], x.data()[(42 + 1) * 32]);
        let last = ((39 * 42) + 39) * 32 + 31;
        assert_eq!(*y.data().last().unwrap(), x.data()[last]);

        let x = Tensor::from_fn(vec![5, 5, 1], |i| i as f64);
        assert_eq!(x.center_crop((5, 5)).unwrap(), x);

        let x = Tensor::from_fn(vec![4, 4, 1], |i| i as f64);
        assert_eq!(x.center_crop((2, 2)).unwrap().data(), &[5.0, 6.0, 9.0, 10.0]);

        assert!(x.center_crop((5, 2)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn normalize_round_trip(v in proptest::collection::vec(-1e6f64..1e6, 2..64)) {
            let x = t1(&v);
            prop_assume!(x.max() > x.min());
            let (y, p) = minmax_normalize(&x, 0.1, 0.9).unwrap();
            prop_assert!(y.data().iter().all(|&e| (0.1..=0.9).contains(&e)));
            prop_assert_eq!(y.min(), 0.1);
            prop_assert_eq!(y.max(), 0.9);
            let back = denormalize(&y, &p).unwrap();
            let scale = x.data().iter().fold(0.0f64, |m, e| m.max(e.abs()));
            for (a, b) in back.data().iter().zip(x.data()) {
                prop_assert!((a - b).abs() <= 1e-12 * scale.max(1e-300));
            }
        }

        #[test]
        fn reshape_preserves_order(v in proptest::collection::vec(-1.0f64..1.0, 24)) {
            let x = Tensor::new(vec![2, 3, 4], v.clone()).unwrap();
            let y = x.reshape(vec![4, 6]).unwrap();
            prop_assert_eq!(y.data(), &v[..]);
            prop_assert_eq!(y.reshape(vec![2, 3, 4]).unwrap(), x);
        }
    }
}
