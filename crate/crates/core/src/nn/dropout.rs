//! Inverted dropout: kept units are scaled by `1/(1−p)` at train time, so inference
//! is the identity.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::arg(format!("drop rate must be in [0, 1), got {rate}")));
    }
    Ok(())
}

/// Mask with entries `0` (dropped, probability `rate`) or `1/(1−rate)`.
pub fn dropout_mask<R: Rng + ?Sized>(shape: &[usize], rate: f64, rng: &mut R) -> Result<Tensor> {
    check_rate(rate)?;
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    Ok(Tensor::from_fn(shape.to_vec(), |_| {
        if rate == 0.0 || rng.random::<f64>() < keep {
            scale
        } else {
            0.0
        }
    }))
}

/// Elementwise product with a mask; used for both directions.
pub fn dropout_apply(x: &Tensor, mask: &Tensor) -> Result<Tensor> {
    x.zip_map(mask, |v, m| v * m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_rate_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::from_fn(vec![3, 4], |i| i as f64 - 5.5);
        let m = dropout_mask(x.shape(), 0.0, &mut rng).unwrap();
        assert_eq!(dropout_apply(&x, &m).unwrap(), x);
    }

    #[test]
    fn rejects_bad_rates() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(dropout_mask(&[2], 1.0, &mut rng).is_err());
        assert!(dropout_mask(&[2], -0.1, &mut rng).is_err());
    }

    #[test]
    fn expectation_is_preserved() {
        // Monte-Carlo expectation over 10^5 independent masks on a constant tensor.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = Tensor::filled(vec![1], 1.0);
        let n = 100_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let m = dropout_mask(x.shape(), 0.2, &mut rng).unwrap();
            acc += dropout_apply(&x, &m).unwrap().data()[0];
        }
        let mean = acc / n as f64;
        assert!((mean - 1.0).abs() < 0.01, "{mean}");
    }
}
