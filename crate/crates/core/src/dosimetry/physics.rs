//! Energy-to-dose conversion, regional dose, tissue classes and the analytic kernel
//! generator that stands in for Monte-Carlo transport.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Joules per MeV.
pub const MEV_TO_J: f64 = 1.602176634e-13;
/// Density of the medium the reference kernels are simulated in, g/cm³.
pub const MC_MEDIUM_DENSITY: f64 = 1.04;
/// Soft-tissue density, g/cm³.
pub const SOFT_TISSUE_DENSITY: f64 = 1.004;
pub const DEFAULT_EDGE_MM: f64 = 5.0;

/// Voxel mass in kg for density `rho` (g/cm³) and edge length in mm.
pub fn voxel_mass_kg(rho: f64, edge_mm: f64) -> f64 {
    let cm = edge_mm / 10.0;
    rho * cm * cm * cm / 1000.0
}

/// `D = E / m` in Gy for deposited energy `E` in MeV.
pub fn energy_to_dose(energy_mev: &Tensor, density: &Tensor, edge_mm: f64) -> Result<Tensor> {
    energy_mev.same_shape(density, "energy_to_dose")?;
    if !(edge_mm > 0.0) {
        return Err(Error::arg(format!("voxel edge must be positive, got {edge_mm}")));
    }
    if density.data().iter().any(|&r| r <= 0.0) {
        return Err(Error::Domain("densities must be positive".into()));
    }
    energy_mev.zip_map(density, |e, rho| e * MEV_TO_J / voxel_mass_kg(rho, edge_mm))
}

/// Mean dose over the voxels where `mask` is set.
pub fn region_mean_dose(dose: &Tensor, mask: &[bool]) -> Result<f64> {
    if mask.len() != dose.len() {
        return Err(Error::shape(format!(
            "mask has {} entries, dose map {}",
            mask.len(),
            dose.len()
        )));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (&d, &m) in dose.data().iter().zip(mask) {
        if m {
            sum += d;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::arg("region mask selects no voxels"));
    }
    Ok(sum / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TissueClass {
    Bone,
    Lung,
    Kidney,
    Liver,
    Spleen,
    Soft,
}

impl TissueClass {
    pub const ALL: [TissueClass; 6] = [
        TissueClass::Bone,
        TissueClass::Lung,
        TissueClass::Kidney,
        TissueClass::Liver,
        TissueClass::Spleen,
        TissueClass::Soft,
    ];

    /// The five organ classes of the training set.
    pub const ORGANS: [TissueClass; 5] = [
        TissueClass::Bone,
        TissueClass::Lung,
        TissueClass::Kidney,
        TissueClass::Liver,
        TissueClass::Spleen,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            TissueClass::Bone => "bone",
            TissueClass::Lung => "lung",
            TissueClass::Kidney => "kidney",
            TissueClass::Liver => "liver",
            TissueClass::Spleen => "spleen",
            TissueClass::Soft => "soft",
        }
    }

    /// Density range in g/cm³. Only the soft-tissue value comes from measurement
    /// literature; the organ ranges are generator defaults.
    pub fn density_range(&self) -> (f64, f64) {
        match self {
            TissueClass::Bone => (1.20, 1.90),
            TissueClass::Lung => (0.20, 0.50),
            TissueClass::Kidney => (1.03, 1.07),
            TissueClass::Liver => (1.04, 1.08),
            TissueClass::Spleen => (1.04, 1.07),
            TissueClass::Soft => (0.98, SOFT_TISSUE_DENSITY + 0.026),
        }
    }

    /// Attenuation scale of the analytic generator, per (g/cm³ · voxel).
    pub fn attenuation(&self) -> f64 {
        0.5
    }
}

impl fmt::Display for TissueClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TissueClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TissueClass::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Format(format!("unknown tissue class '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleParams {
    /// Total deposited energy per decay, MeV.
    pub e_total: f64,
    /// Share of the energy kept in the source voxel.
    pub center_fraction: f64,
    pub lambda: f64,
    /// Relative spread of the multiplicative log-normal noise on the shell weights.
    pub noise: f64,
    pub edge_mm: f64,
}

impl Default for OracleParams {
    fn default() -> Self {
        OracleParams {
            e_total: 1.0,
            center_fraction: 0.6,
            lambda: 0.5,
            noise: 0.0,
            edge_mm: DEFAULT_EDGE_MM,
        }
    }
}

impl OracleParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.center_fraction > 0.0 && self.center_fraction < 1.0) {
            return Err(Error::arg("center fraction must be in (0, 1)"));
        }
        if !(self.lambda > 0.0) || !(self.e_total > 0.0) || !(self.edge_mm > 0.0) || !(self.noise >= 0.0) {
            return Err(Error::arg("oracle needs positive energy, attenuation and edge, and noise >= 0"));
        }
        Ok(())
    }
}

/// Mean density along the segment from the centre to `v`, sampled at the midpoints of
/// `ceil(d)` equal steps and read from the nearest voxel.
fn path_density(density: &Tensor, dims: [usize; 3], c: [usize; 3], off: [f64; 3], d: f64) -> f64 {
    let k = d.ceil() as usize;
    let mut sum = 0.0;
    for j in 0..k {
        let s = (j as f64 + 0.5) / k as f64;
        let idx: Vec<usize> = (0..3)
            .map(|a| ((c[a] as f64 + s * off[a]).round() as usize).min(dims[a] - 1))
            .collect();
        sum += density.data()[(idx[0] * dims[1] + idx[1]) * dims[2] + idx[2]];
    }
    sum / k as f64
}

/// Deposited energy (MeV) per voxel for one decay in the centre voxel.
///
/// The centre holds `f_c·E`; every other voxel gets a share of `(1 − f_c)·E`
/// proportional to `exp(−λ·ρ̄·d)/d²`.
pub fn synth_energy(density: &Tensor, params: &OracleParams, seed: u64) -> Result<Tensor> {
    params.validate()?;
    let dims = match *density.shape() {
        [a, b, c] if a % 2 == 1 && b % 2 == 1 && c % 2 == 1 => [a, b, c],
        _ => return Err(Error::shape(format!("density kernel must have odd rank-3 dims, got {:?}", density.shape()))),
    };
    if density.data().iter().any(|&r| r <= 0.0) {
        return Err(Error::Domain("densities must be positive".into()));
    }
    let c = [dims[0] / 2, dims[1] / 2, dims[2] / 2];
    let centre = (c[0] * dims[1] + c[1]) * dims[2] + c[2];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, params.noise).map_err(|e| Error::arg(e.to_string()))?;

    let mut w = vec![0.0; density.len()];
    for x in 0..dims[0] {
        for y in 0..dims[1] {
            for z in 0..dims[2] {
                let i = (x * dims[1] + y) * dims[2] + z;
                if i == centre {
                    continue;
                }
                let off = [
                    x as f64 - c[0] as f64,
                    y as f64 - c[1] as f64,
                    z as f64 - c[2] as f64,
                ];
                let d2 = off[0] * off[0] + off[1] * off[1] + off[2] * off[2];
                let d = d2.sqrt();
                let rho = path_density(density, dims, c, off, d);
                let mut wi = (-params.lambda * rho * d).exp() / d2;
                if params.noise > 0.0 {
                    wi *= noise.sample(&mut rng).exp();
                }
                w[i] = wi;
            }
        }
    }
    let total: f64 = w.iter().sum();
    let shell = (1.0 - params.center_fraction) * params.e_total;
    for v in w.iter_mut() {
        *v *= shell / total;
    }
    w[centre] = params.center_fraction * params.e_total;
    Tensor::new(dims.to_vec(), w)
}

/// Dose-voxel kernel in Gy per decay.
pub fn synth_dvk_oracle(density: &Tensor, params: &OracleParams, seed: u64) -> Result<Tensor> {
    let e = synth_energy(density, params, seed)?;
    energy_to_dose(&e, density, params.edge_mm)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_joule_per_kilogram_is_one_gray() {
        // 100 mm edge at unit density is one litre, one kilogram
        let e = Tensor::filled(vec![1], 1.0 / MEV_TO_J);
        let d = energy_to_dose(&e, &Tensor::filled(vec![1], 1.0), 100.0).unwrap();
        assert!((d.data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mev_in_reference_voxel() {
        let d = energy_to_dose(&Tensor::filled(vec![1], 1.0), &Tensor::filled(vec![1], MC_MEDIUM_DENSITY), 5.0).unwrap();
        assert!((d.data()[0] - 1.23244e-9).abs() < 1e-14);
        let d2 = energy_to_dose(&Tensor::filled(vec![1], 1.0), &Tensor::filled(vec![1], 2.0 * MC_MEDIUM_DENSITY), 5.0).unwrap();
        assert_eq!(d2.data()[0] * 2.0, d.data()[0]);
        assert!(energy_to_dose(&Tensor::filled(vec![1], 1.0), &Tensor::filled(vec![1], -1.0), 5.0).is_err());
    }

    #[test]
    fn region_means() {
        let d = Tensor::filled(vec![2, 2, 2], 3.5);
        assert_eq!(region_mean_dose(&d, &[true; 8]).unwrap(), 3.5);
        let d = Tensor::from_fn(vec![2, 2, 2], |i| i as f64);
        let mut m = [false; 8];
        m[5] = true;
        assert_eq!(region_mean_dose(&d, &m).unwrap(), 5.0);
        assert!(region_mean_dose(&d, &[false; 8]).is_err());
    }

    #[test]
    fn oracle_keeps_centre_fraction() {
        let rho = Tensor::from_fn(vec![9, 9, 9], |i| 0.5 + (i % 7) as f64 * 0.1);
        let e = synth_energy(&rho, &OracleParams::default(), 1).unwrap();
        assert!((e.data()[364] / e.sum() - 0.6).abs() < 1e-12);
        assert!((e.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn oracle_rejects_bad_params() {
        let rho = Tensor::filled(vec![9, 9, 9], 1.0);
        for p in [
            OracleParams { center_fraction: 1.0, ..Default::default() },
            OracleParams { lambda: 0.0, ..Default::default() },
        ] {
            assert!(synth_energy(&rho, &p, 0).is_err());
        }
        assert!(synth_energy(&Tensor::filled(vec![8, 9, 9], 1.0), &OracleParams::default(), 0).is_err());
    }

    #[test]
    fn class_names_parse() {
        for c in TissueClass::ALL {
            assert_eq!(c.name().parse::<TissueClass>().unwrap(), c);
            let (lo, hi) = c.density_range();
            assert!(0.0 < lo && lo < hi);
        }
    }
}
