//! Synthetic density/dose kernel pairs, their on-disk layout and loader.
//!
//! ```text
//! <dir>/manifest.txt
//! <dir>/density/00000.dvkt   g/cm³
//! <dir>/dose/00000.dvkt      Gy per decay
//! ```
//!
//! Files hold physical values. The manifest carries min-max parameters fitted over
//! each whole split; [`Dataset::pairs`] applies them.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dosimetry::physics::{synth_dvk_oracle, OracleParams, TissueClass};
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{read_tensor, write_tensor, NormalizationParams, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            _ => Err(Error::Format(format!("unknown split '{s}'"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct GenerateConfig {
    pub per_class: usize,
    pub classes: Vec<TissueClass>,
    pub seed: u64,
    pub train_fraction: f64,
    pub oracle: OracleParams,
    /// Per-voxel jitter as a fraction of the class density range.
    pub density_noise: f64,
    /// Probability that a sample carries a box of a second tissue.
    pub inclusion_prob: f64,
    pub kernel_size: usize,
    /// Target interval of the min-max normalization.
    pub norm_range: (f64, f64),
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            per_class: 20,
            classes: TissueClass::ORGANS.to_vec(),
            seed: 0,
            train_fraction: 0.7,
            oracle: OracleParams::default(),
            density_noise: 0.15,
            inclusion_prob: 0.0,
            kernel_size: 9,
            norm_range: (0.1, 0.9),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub index: usize,
    pub class: TissueClass,
    pub split: Split,
    pub density: Tensor,
    pub dose: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitNorm {
    pub density: NormalizationParams,
    pub dose: NormalizationParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub train_fraction: f64,
    pub samples: Vec<Sample>,
    pub train_norm: SplitNorm,
    pub val_norm: SplitNorm,
}

fn draw_density(rng: &mut ChaCha8Rng, class: TissueClass, cfg: &GenerateConfig) -> Tensor {
    let n = cfg.kernel_size;
    let (lo, hi) = class.density_range();
    let base = rng.random_range(lo..=hi);
    let jitter = cfg.density_noise * (hi - lo);
    let mut t = Tensor::from_fn(vec![n, n, n], |_| {
        let v = base + jitter * rng.random_range(-1.0..=1.0);
        v.clamp(lo, hi)
    });
    if cfg.inclusion_prob > 0.0 && rng.random::<f64>() < cfg.inclusion_prob {
        let others: Vec<TissueClass> = cfg.classes.iter().copied().filter(|&c| c != class).collect();
        if let Some(&other) = others.get(rng.random_range(0..others.len().max(1))) {
            let (olo, ohi) = other.density_range();
            let v = rng.random_range(olo..=ohi);
            let size = rng.random_range(2..=(n / 2).max(2));
            let start: Vec<usize> = (0..3).map(|_| rng.random_range(0..=n - size)).collect();
            let d = t.data_mut();
            for x in start[0]..start[0] + size {
                for y in start[1]..start[1] + size {
                    for z in start[2]..start[2] + size {
                        d[(x * n + y) * n + z] = v;
                    }
                }
            }
        }
    }
    t
}

fn fit_norms(samples: &[Sample], split: Split, range: (f64, f64)) -> Result<SplitNorm> {
    let picked: Vec<&Sample> = samples.iter().filter(|s| s.split == split).collect();
    if picked.is_empty() {
        return Err(Error::arg(format!("{} split is empty", split.name())));
    }
    Ok(SplitNorm {
        density: NormalizationParams::fit(picked.iter().map(|s| &s.density), range.0, range.1)?,
        dose: NormalizationParams::fit(picked.iter().map(|s| &s.dose), range.0, range.1)?,
    })
}

/// Draws `per_class` samples for every class, shuffles and splits them, and fits the
/// normalization of each split. Deterministic for a given config.
pub fn generate_dataset(cfg: &GenerateConfig) -> Result<Dataset> {
    if cfg.classes.is_empty() || cfg.per_class == 0 {
        return Err(Error::arg("need at least one class and one sample per class"));
    }
    if !(cfg.train_fraction > 0.0 && cfg.train_fraction < 1.0) {
        return Err(Error::arg("train fraction must be in (0, 1)"));
    }
    if cfg.kernel_size.is_multiple_of(2) || cfg.kernel_size < 3 {
        return Err(Error::arg("kernel size must be odd and >= 3"));
    }
    if !(0.0..=1.0).contains(&cfg.inclusion_prob) || !(cfg.density_noise >= 0.0) {
        return Err(Error::arg("inclusion probability must be in [0, 1] and noise >= 0"));
    }
    cfg.oracle.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.per_class * cfg.classes.len();
    let jobs: Vec<(TissueClass, u64)> = (0..n)
        .map(|i| (cfg.classes[i / cfg.per_class], rng.random()))
        .collect();
    let drawn: Vec<Result<(TissueClass, Tensor, Tensor)>> = par::map_range(n, |i| {
        let (class, seed) = jobs[i];
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let density = draw_density(&mut r, class, cfg);
        let dose = synth_dvk_oracle(&density, &cfg.oracle, r.random())?;
        Ok((class, density, dose))
    });

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_train = (n as f64 * cfg.train_fraction).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::arg(format!("{n} samples cannot be split at {}", cfg.train_fraction)));
    }
    let mut split = vec![Split::Val; n];
    for &i in &order[..n_train] {
        split[i] = Split::Train;
    }

    let mut samples = Vec::with_capacity(n);
    for (index, r) in drawn.into_iter().enumerate() {
        let (class, density, dose) = r?;
        samples.push(Sample {
            index,
            class,
            split: split[index],
            density,
            dose,
        });
    }
    Ok(Dataset {
        seed: cfg.seed,
        train_fraction: cfg.train_fraction,
        train_norm: fit_norms(&samples, Split::Train, cfg.norm_range)?,
        val_norm: fit_norms(&samples, Split::Val, cfg.norm_range)?,
        samples,
    })
}

fn fmt_norm(p: &NormalizationParams) -> String {
    format!("{:?} {:?} {:?} {:?}", p.data_min, p.data_max, p.low, p.high)
}

fn parse_norm(s: &str) -> Result<NormalizationParams> {
    let v: Vec<f64> = s
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| Error::Format(format!("bad number '{t}' in manifest"))))
        .collect::<Result<_>>()?;
    let [a, b, c, d] = v[..] else {
        return Err(Error::Format(format!("normalization line needs 4 numbers: '{s}'")));
    };
    NormalizationParams::new(a, b, c, d)
}

impl Dataset {
    pub fn norm(&self, split: Split) -> &SplitNorm {
        match split {
            Split::Train => &self.train_norm,
            Split::Val => &self.val_norm,
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    /// Normalized `(density, dose)` pairs of one split, in index order.
    pub fn pairs(&self, split: Split) -> Vec<(Tensor, Tensor, TissueClass)> {
        let n = self.norm(split);
        self.split(split)
            .map(|s| (n.density.apply(&s.density), n.dose.apply(&s.dose), s.class))
            .collect()
    }

    pub fn manifest(&self) -> String {
        let mut m = String::new();
        let _ = writeln!(m, "# density/dose kernel dataset");
        let _ = writeln!(m, "seed = {}", self.seed);
        let _ = writeln!(m, "train_fraction = {:?}", self.train_fraction);
        for split in [Split::Train, Split::Val] {
            let n = self.norm(split);
            let _ = writeln!(m, "norm.{}.density = {}", split.name(), fmt_norm(&n.density));
            let _ = writeln!(m, "norm.{}.dose = {}", split.name(), fmt_norm(&n.dose));
        }
        for s in &self.samples {
            let _ = writeln!(
                m,
                "{:05} {} {} density/{:05}.dvkt dose/{:05}.dvkt",
                s.index,
                s.class,
                s.split.name(),
                s.index,
                s.index
            );
        }
        m
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("density"))?;
        fs::create_dir_all(dir.join("dose"))?;
        for s in &self.samples {
            write_tensor(dir.join(format!("density/{:05}.dvkt", s.index)), &s.density)?;
            write_tensor(dir.join(format!("dose/{:05}.dvkt", s.index)), &s.dose)?;
        }
        fs::write(dir.join("manifest.txt"), self.manifest())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let text = fs::read_to_string(dir.join("manifest.txt"))?;
        let mut seed = None;
        let mut frac = None;
        let mut norms: [[Option<NormalizationParams>; 2]; 2] = [[None; 2]; 2];
        let mut samples = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some((k, v)) = line.split_once('=') {
                let (k, v) = (k.trim(), v.trim());
                let bad = |_| Error::Format(format!("manifest line {}: bad value '{v}'", ln + 1));
                match k {
                    "seed" => seed = Some(v.parse::<u64>().map_err(bad)?),
                    "train_fraction" => frac = Some(v.parse::<f64>().map_err(|_| Error::Format(format!("bad train_fraction '{v}'")))?),
                    _ => {
                        let parts: Vec<&str> = k.split('.').collect();
                        let ["norm", split, what] = parts[..] else {
                            return Err(Error::Format(format!("manifest line {}: unknown key '{k}'", ln + 1)));
                        };
                        let si = Split::parse(split)? as usize;
                        let wi = match what {
                            "density" => 0,
                            "dose" => 1,
                            _ => return Err(Error::Format(format!("unknown normalization target '{what}'"))),
                        };
                        norms[si][wi] = Some(parse_norm(v)?);
                    }
                }
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            let [idx, class, split, dpath, spath] = f[..] else {
                return Err(Error::Format(format!("manifest line {}: expected 5 fields", ln + 1)));
            };
            let index = idx
                .parse::<usize>()
                .map_err(|_| Error::Format(format!("manifest line {}: bad index '{idx}'", ln + 1)))?;
            let density = read_tensor(dir.join(dpath))?;
            let dose = read_tensor(dir.join(spath))?;
            density.same_shape(&dose, "dataset sample")?;
            samples.push(Sample {
                index,
                class: class.parse()?,
                split: Split::parse(split)?,
                density,
                dose,
            });
        }
        let need = |o: Option<NormalizationParams>, what: &str| o.ok_or_else(|| Error::Format(format!("manifest lacks {what}")));
        Ok(Dataset {
            seed: seed.ok_or_else(|| Error::Format("manifest lacks seed".into()))?,
            train_fraction: frac.ok_or_else(|| Error::Format("manifest lacks train_fraction".into()))?,
            train_norm: SplitNorm {
                density: need(norms[0][0], "norm.train.density")?,
                dose: need(norms[0][1], "norm.train.dose")?,
            },
            val_norm: SplitNorm {
                density: need(norms[1][0], "norm.val.density")?,
                dose: need(norms[1][1], "norm.val.dose")?,
            },
            samples,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GenerateConfig {
        GenerateConfig {
            per_class: 4,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn counts_and_split() {
        let d = generate_dataset(&small()).unwrap();
        assert_eq!(d.samples.len(), 20);
        assert_eq!(d.split(Split::Train).count(), 14);
        assert_eq!(d.split(Split::Val).count(), 6);
    }

    #[test]
    fn densities_stay_in_class_range() {
        let d = generate_dataset(&small()).unwrap();
        for s in &d.samples {
            let (lo, hi) = s.class.density_range();
            assert!(s.density.data().iter().all(|&v| v >= lo && v <= hi), "{}", s.class);
        }
    }

    #[test]
    fn deterministic_and_round_trips_through_disk() {
        let a = generate_dataset(&small()).unwrap();
        let b = generate_dataset(&small()).unwrap();
        assert_eq!(a, b);
        let dir = tempfile::tempdir().unwrap();
        a.write(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back, a);
        assert_eq!(back.manifest(), a.manifest());
    }

    #[test]
    fn normalized_pairs_hit_the_interval() {
        let d = generate_dataset(&small()).unwrap();
        let pairs = d.pairs(Split::Train);
        let lo = pairs.iter().map(|p| p.1.min()).fold(f64::INFINITY, f64::min);
        let hi = pairs.iter().map(|p| p.1.max()).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!((lo, hi), (0.1, 0.9));
    }

    #[test]
    fn inclusions_are_allowed() {
        let cfg = GenerateConfig {
            inclusion_prob: 1.0,
            ..small()
        };
        generate_dataset(&cfg).unwrap();
    }
}
