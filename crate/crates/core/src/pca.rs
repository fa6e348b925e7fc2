//! Principal component analysis of flattened kernels, with scree export.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

/// Jacobi sweeps stop once the off-diagonal Frobenius norm falls below this times ‖C‖_F.
pub const OFF_DIAGONAL_TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct PcaResult {
    /// Non-increasing.
    pub eigenvalues: Vec<f64>,
    /// Row `i` is the unit eigenvector of `eigenvalues[i]`.
    pub eigenvectors: Tensor,
    pub fractions: Vec<f64>,
    pub mean: Vec<f64>,
}

impl PcaResult {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn component(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.eigenvectors.data()[i * d..(i + 1) * d]
    }

    pub fn cumulative(&self) -> Vec<f64> {
        self.fractions
            .iter()
            .scan(0.0, |acc, f| {
                *acc += f;
                Some(*acc)
            })
            .collect()
    }
}

/// Covariance `(1/n) XᵀX` of the mean-centred rows of `samples` (`[n, d]`), row-major
/// `d×d`, together with the mean.
pub fn covariance(samples: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    if samples.rank() != 2 {
        return Err(Error::shape(format!("samples must be [n, d], got {:?}", samples.shape())));
    }
    let (n, d) = (samples.shape()[0], samples.shape()[1]);
    if n < 2 {
        return Err(Error::arg(format!("need at least 2 samples, got {n}")));
    }
    let x = samples.data();
    let mut mean = vec![0.0; d];
    for row in x.chunks(d) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    // Column-major centred copy so each covariance entry is a contiguous dot product.
    let mut xt = vec![0.0; n * d];
    for (s, row) in x.chunks(d).enumerate() {
        for j in 0..d {
            xt[j * n + s] = row[j] - mean[j];
        }
    }
    let mut cov = vec![0.0; d * d];
    par::for_each_chunk(&mut cov, d, |i, out| {
        let a = &xt[i * n..(i + 1) * n];
        for (j, o) in out.iter_mut().enumerate() {
            let b = &xt[j * n..(j + 1) * n];
            *o = a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>() / n as f64;
        }
    });
    Ok((cov, mean))
}

fn off_norm(a: &[f64], d: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..d {
        for j in 0..d {
            if i != j {
                s += a[i * d + j] * a[i * d + j];
            }
        }
    }
    s.sqrt()
}

/// Pairings of `0..d` in round-robin order: `d-1` rounds (or `d` for odd `d`), each
/// a set of disjoint `(p, q)` with `p < q`, together covering every pair once.
fn round_robin(d: usize) -> Vec<Vec<(usize, usize)>> {
    let m = d + d % 2;
    let mut ring: Vec<usize> = (0..m).collect();
    let mut rounds = Vec::with_capacity(m.saturating_sub(1));
    for _ in 1..m {
        let round = (0..m / 2)
            .map(|i| (ring[i], ring[m - 1 - i]))
            .filter(|&(a, b)| a < d && b < d)
            .map(|(a, b)| (a.min(b), a.max(b)))
            .collect();
        rounds.push(round);
        ring[1..].rotate_right(1);
    }
    rounds
}

/// Rows `p < q` of a row-major matrix ← `(c·r_p − s·r_q, s·r_p + c·r_q)`.
fn rotate_pair(m: &mut [f64], d: usize, p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = m.split_at_mut(q * d);
    let rp = &mut head[p * d..(p + 1) * d];
    for (x, y) in rp.iter_mut().zip(tail[..d].iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric row-major `d×d` matrix.
///
/// Pairs are visited in round-robin order; each round applies rotations on disjoint
/// index pairs, so rows can be updated independently. Returns unsorted eigenvalues
/// and the eigenvectors as rows.
pub fn jacobi_eigen(matrix: &[f64], d: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if matrix.len() != d * d || d == 0 {
        return Err(Error::shape(format!("expected {d}x{d} matrix, got {} entries", matrix.len())));
    }
    let mut a = matrix.to_vec();
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let frob = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = OFF_DIAGONAL_TOL * frob;
    let skip = tol / d as f64;
    let rounds = round_robin(d);
    let mut sweeps = 0;
    while off_norm(&a, d) > tol {
        if sweeps == MAX_SWEEPS {
            return Err(Error::Degenerate(format!("Jacobi did not converge in {MAX_SWEEPS} sweeps")));
        }
        sweeps += 1;
        for round in &rounds {
            let mut active = Vec::with_capacity(round.len());
            for &(p, q) in round {
                let apq = a[p * d + q];
                if apq.abs() <= skip {
                    continue;
                }
                let (app, aqq) = (a[p * d + p], a[q * d + q]);
                let tau = (aqq - app) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                active.push((p, q, c, s, app - t * apq, aqq + t * apq));
            }
            if active.is_empty() {
                continue;
            }
            for &(p, q, c, s, _, _) in &active {
                rotate_pair(&mut a, d, p, q, c, s);
                rotate_pair(&mut v, d, p, q, c, s);
            }
            let active_ref = &active;
            par::for_each_chunk(&mut a, d, |_, row| {
                for &(p, q, c, s, _, _) in active_ref {
                    let (x, y) = (row[p], row[q]);
                    row[p] = c * x - s * y;
                    row[q] = s * x + c * y;
                }
            });
            for &(p, q, _, _, app, aqq) in &active {
                a[p * d + p] = app;
                a[q * d + q] = aqq;
                a[p * d + q] = 0.0;
                a[q * d + p] = 0.0;
            }
        }
    }
    Ok(((0..d).map(|i| a[i * d + i]).collect(), v))
}

/// Fits PCA to the rows of `samples` (`[n, d]`, n ≥ 2).
pub fn pca_fit(samples: &Tensor) -> Result<PcaResult> {
    let (cov, mean) = covariance(samples)?;
    let d = mean.len();
    let (vals, vecs) = jacobi_eigen(&cov, d)?;
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| vals[j].total_cmp(&vals[i]));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| vals[i]).collect();
    let mut sorted = Vec::with_capacity(d * d);
    for &i in &order {
        sorted.extend_from_slice(&vecs[i * d..(i + 1) * d]);
    }
    let total: f64 = eigenvalues.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate("samples have zero variance".into()));
    }
    Ok(PcaResult {
        fractions: eigenvalues.iter().map(|l| l / total).collect(),
        eigenvalues,
        eigenvectors: Tensor::new(vec![d, d], sorted)?,
        mean,
    })
}

/// Stacks flattened tensors into the `[n, d]` sample matrix.
pub fn sample_matrix(items: &[Tensor]) -> Result<Tensor> {
    let first = items.first().ok_or_else(|| Error::arg("no samples"))?;
    let d = first.len();
    let mut data = Vec::with_capacity(items.len() * d);
    for t in items {
        if t.len() != d {
            return Err(Error::shape(format!("sample of {} values, expected {d}", t.len())));
        }
        data.extend_from_slice(t.data());
    }
    Tensor::new(vec![items.len(), d], data)
}

pub const SCREE_HEADER: &str = "component_index,eigenvalue,variance_fraction,cumulative_fraction";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScreeRow {
    pub component: usize,
    pub eigenvalue: f64,
    pub fraction: f64,
    pub cumulative: f64,
}

pub fn scree_rows(result: &PcaResult) -> Vec<ScreeRow> {
    result
        .eigenvalues
        .iter()
        .zip(&result.fractions)
        .zip(result.cumulative())
        .enumerate()
        .map(|(i, ((&eigenvalue, &fraction), cumulative))| ScreeRow {
            component: i + 1,
            eigenvalue,
            fraction,
            cumulative,
        })
        .collect()
}

pub fn scree_csv(result: &PcaResult) -> String {
    let mut s = String::from(SCREE_HEADER);
    s.push('\n');
    for r in scree_rows(result) {
        let _ = writeln!(s, "{},{:.16e},{:.16e},{:.16e}", r.component, r.eigenvalue, r.fraction, r.cumulative);
    }
    s
}

pub fn scree_export(result: &PcaResult, path: &Path) -> Result<()> {
    fs::write(path, scree_csv(result))?;
    Ok(())
}

pub fn parse_scree(text: &str) -> Result<Vec<ScreeRow>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(SCREE_HEADER) {
        return Err(Error::Format("missing scree header".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Format(format!("bad scree line '{l}'"));
            if f.len() != 4 {
                return Err(bad());
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
            Ok(ScreeRow {
                component: f[0].trim().parse().map_err(|_| bad())?,
                eigenvalue: num(f[1])?,
                fraction: num(f[2])?,
                cumulative: num(f[3])?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn random_samples(n: usize, d: usize, seed: u64) -> Tensor {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(vec![n, d], |i| r.random_range(-1.0..1.0) * (1.0 + (i % d) as f64))
    }

    fn mat_vec(c: &[f64], u: &[f64]) -> Vec<f64> {
        let d = u.len();
        (0..d).map(|i| (0..d).map(|j| c[i * d + j] * u[j]).sum()).collect()
    }

    #[test]
    fn eigenpairs_satisfy_definition() {
        let x = random_samples(50, 12, 1);
        let (c, _) = covariance(&x).unwrap();
        let r = pca_fit(&x).unwrap();
        for i in 0..12 {
            let u = r.component(i);
            let cu = mat_vec(&c, u);
            let res: f64 = cu.iter().zip(u).map(|(a, b)| (a - r.eigenvalues[i] * b).powi(2)).sum::<f64>().sqrt();
            assert!(res < 1e-8, "{res}");
            for j in 0..12 {
                let dot: f64 = u.iter().zip(r.component(j)).map(|(a, b)| a * b).sum();
                assert!((dot - if i == j { 1.0 } else { 0.0 }).abs() < 1e-9);
            }
        }
        assert!(r.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
        let trace: f64 = (0..12).map(|i| c[i * 12 + i]).sum();
        assert!((r.eigenvalues.iter().sum::<f64>() - trace).abs() < 1e-9);
    }

    #[test]
    fn line_through_mean_is_rank_one() {
        let dir = [0.6, 0.8, 0.0];
        let x = Tensor::from_fn(vec![10, 3], |i| {
            let s = (i / 3) as f64 - 4.5;
            5.0 + s * dir[i % 3]
        });
        let r = pca_fit(&x).unwrap();
        assert!((r.fractions[0] - 1.0).abs() < 1e-12);
        assert!(r.fractions[1..].iter().all(|f| f.abs() < 1e-12));
        assert!(r.mean.iter().all(|m| (m - 5.0).abs() < 1e-12));
    }

    #[test]
    fn diag_four_one_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let nrm = Normal::new(0.0, 1.0).unwrap();
        let n = 100_000;
        let x = Tensor::from_fn(vec![n, 2], |i| nrm.sample(&mut rng) * if i % 2 == 0 { 2.0 } else { 1.0 });
        let r = pca_fit(&x).unwrap();
        assert!((r.fractions[0] - 0.8).abs() < 0.03);
        assert!((r.fractions[1] - 0.2).abs() < 0.03);
    }

    #[test]
    fn round_robin_covers_every_pair_once() {
        for d in 1..9 {
            let mut seen = std::collections::HashSet::new();
            for round in round_robin(d) {
                let mut used = std::collections::HashSet::new();
                for (p, q) in round {
                    assert!(p < q && used.insert(p) && used.insert(q));
                    assert!(seen.insert((p, q)));
                }
            }
            assert_eq!(seen.len(), d * (d - 1) / 2);
        }
    }

    #[test]
    fn scree_round_trip() {
        let r = pca_fit(&random_samples(30, 5, 2)).unwrap();
        let rows = parse_scree(&scree_csv(&r)).unwrap();
        assert_eq!(rows, scree_rows(&r));
        assert!((rows.last().unwrap().cumulative - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_single_sample_and_constant_data() {
        assert!(pca_fit(&Tensor::zeros(vec![1, 3])).is_err());
        assert!(matches!(pca_fit(&Tensor::filled(vec![4, 3], 2.0)), Err(Error::Degenerate(_))));
    }
}
