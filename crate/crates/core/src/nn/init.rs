//! LeCun initialization.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitDistribution {
    /// `U(−√(3/fan_in), √(3/fan_in))`
    #[default]
    Uniform,
    /// `N(0, 1/fan_in)`
    Normal,
}

impl std::str::FromStr for InitDistribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "uniform" | "lecun_uniform" => Ok(InitDistribution::Uniform),
            "normal" | "lecun_normal" => Ok(InitDistribution::Normal),
            _ => Err(Error::arg(format!("unknown init distribution '{s}'"))),
        }
    }
}

/// Both distributions have variance `1/fan_in`.
pub fn init_lecun<R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    rng: &mut R,
    dist: InitDistribution,
) -> Result<Tensor> {
    if fan_in == 0 {
        return Err(Error::arg("fan_in must be >= 1"));
    }
    let n = fan_in as f64;
    let t = match dist {
        InitDistribution::Uniform => {
            let bound = (3.0 / n).sqrt();
            let u = Uniform::new_inclusive(-bound, bound).map_err(|e| Error::arg(e.to_string()))?;
            Tensor::from_fn(shape.to_vec(), |_| u.sample(rng))
        }
        InitDistribution::Normal => {
            let d = Normal::new(0.0, (1.0 / n).sqrt()).map_err(|e| Error::arg(e.to_string()))?;
            Tensor::from_fn(shape.to_vec(), |_| d.sample(rng))
        }
    };
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = init_lecun(&[1000], 3, &mut rng, InitDistribution::Uniform).unwrap();
        assert!(t.data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn variance_is_inverse_fan_in() {
        for dist in [InitDistribution::Uniform, InitDistribution::Normal] {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let t = init_lecun(&[1_000_000], 9, &mut rng, dist).unwrap();
            let n = t.len() as f64;
            let mean = t.sum() / n;
            let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!((var * 9.0 - 1.0).abs() < 0.05, "{dist:?}: {var}");
        }
    }

    #[test]
    fn seeded_is_deterministic() {
        let a = init_lecun(&[3, 3, 2, 4], 18, &mut ChaCha8Rng::seed_from_u64(5), InitDistribution::Normal).unwrap();
        let b = init_lecun(&[3, 3, 2, 4], 18, &mut ChaCha8Rng::seed_from_u64(5), InitDistribution::Normal).unwrap();
        assert_eq!(a, b);
        assert!(init_lecun(&[2], 0, &mut ChaCha8Rng::seed_from_u64(5), InitDistribution::Normal).is_err());
    }
}
