//! Losses and metrics. Every function takes the prediction first and the target second;
//! gradients are with respect to the prediction.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Option<Tensor>,
}

impl LossValue {
    fn new(value: f64, grad: Tensor) -> Self {
        LossValue { value, grad: Some(grad) }
    }

    pub fn grad(&self) -> &Tensor {
        self.grad.as_ref().expect("loss computed without gradient")
    }
}

fn pair(pred: &Tensor, target: &Tensor, what: &str) -> Result<()> {
    pred.same_shape(target, what)
}

/// `(1/N)·Σ(p − t)²`
pub fn mse(pred: &Tensor, target: &Tensor) -> Result<LossValue> {
    pair(pred, target, "mse")?;
    let n = pred.len() as f64;
    let value = pred.data().iter().zip(target.data()).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n;
    let grad = pred.zip_map(target, |p, t| 2.0 * (p - t) / n)?;
    Ok(LossValue::new(value, grad))
}

/// `(1/N)·Σ|p − t|`; the subgradient is 0 at ties.
pub fn mae(pred: &Tensor, target: &Tensor) -> Result<LossValue> {
    pair(pred, target, "mae")?;
    let n = pred.len() as f64;
    let value = pred.data().iter().zip(target.data()).map(|(p, t)| (p - t).abs()).sum::<f64>() / n;
    let grad = pred.zip_map(target, |p, t| {
        let d = p - t;
        if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        }
    })?;
    Ok(LossValue::new(value, grad))
}

fn check_distribution(x: &Tensor, what: &str) -> Result<()> {
    if x.data().iter().any(|&v| v <= 0.0) {
        return Err(Error::Domain(format!("{what} must be strictly positive")));
    }
    let s = x.sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::Domain(format!("{what} must sum to 1, sums to {s}")));
    }
    Ok(())
}

/// `Σ t·log(t/q)` with the prediction `q`.
pub fn kl_divergence(pred: &Tensor, target: &Tensor) -> Result<LossValue> {
    pair(pred, target, "kl_divergence")?;
    check_distribution(pred, "predicted distribution")?;
    check_distribution(target, "target distribution")?;
    let value = pred.data().iter().zip(target.data()).map(|(q, p)| p * (p / q).ln()).sum();
    let grad = pred.zip_map(target, |q, p| -p / q)?;
    Ok(LossValue::new(value, grad))
}

fn check_open_unit(x: &Tensor, what: &str) -> Result<()> {
    if x.data().iter().any(|&v| !(v > 0.0 && v < 1.0)) {
        return Err(Error::Domain(format!("{what} entries must lie in (0, 1)")));
    }
    Ok(())
}

/// `Σ t·log(t/y) + (1−t)·log((1−t)/(1−y))`
pub fn log_loss(pred: &Tensor, target: &Tensor) -> Result<LossValue> {
    pair(pred, target, "log_loss")?;
    check_open_unit(pred, "prediction")?;
    check_open_unit(target, "target")?;
    let value = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&y, &x)| x * (x / y).ln() + (1.0 - x) * ((1.0 - x) / (1.0 - y)).ln())
        .sum();
    let grad = pred.zip_map(target, |y, x| (y - x) / (y * (1.0 - y)))?;
    Ok(LossValue::new(value, grad))
}

/// `−Σ t·log y + (1−t)·log(1−y)`, whose gradient is `(y − t)/(y(1 − y))`.
pub fn entropy_like(pred: &Tensor, target: &Tensor) -> Result<LossValue> {
    pair(pred, target, "entropy_like")?;
    check_open_unit(pred, "prediction")?;
    check_open_unit(target, "target")?;
    let value = -pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&y, &x)| x * y.ln() + (1.0 - x) * (1.0 - y).ln())
        .sum::<f64>();
    let grad = pred.zip_map(target, |y, x| (y - x) / (y * (1.0 - y)))?;
    Ok(LossValue::new(value, grad))
}

fn iou_sums(pred: &[f64], target: &[f64]) -> Result<(f64, f64)> {
    let mut smin = 0.0;
    let mut smax = 0.0;
    for (&p, &t) in pred.iter().zip(target) {
        if p < 0.0 || t < 0.0 {
            return Err(Error::Domain("soft IoU needs nonnegative entries".into()));
        }
        smin += p.min(t);
        smax += p.max(t);
    }
    if smax == 0.0 {
        return Err(Error::Domain("soft IoU of two all-zero tensors".into()));
    }
    Ok((smin, smax))
}

/// Soft Jaccard index `J = Σmin(p, t) / Σmax(p, t)` over the whole tensor.
pub fn soft_iou(pred: &Tensor, target: &Tensor) -> Result<f64> {
    pair(pred, target, "soft_iou")?;
    let (a, b) = iou_sums(pred.data(), target.data())?;
    Ok(a / b)
}

// ∂J/∂p for one sample, written into `out`. Ties take the mean of both one-sided slopes.
fn iou_grad(pred: &[f64], target: &[f64], smin: f64, smax: f64, out: &mut [f64]) {
    let up = 1.0 / smax;
    let down = -smin / (smax * smax);
    for ((o, &p), &t) in out.iter_mut().zip(pred).zip(target) {
        *o = if p < t {
            up
        } else if p > t {
            down
        } else {
            0.5 * (up + down)
        };
    }
}

fn samples(x: &Tensor) -> usize {
    if x.rank() >= 2 {
        x.shape()[0]
    } else {
        1
    }
}

/// `1 − J`, averaged over the samples of a batch (leading axis; a rank-1 tensor is one sample).
pub fn iou_loss(pred: &Tensor, target: &Tensor) -> Result<LossValue> {
    pair(pred, target, "iou_loss")?;
    let n = samples(pred);
    let k = pred.len() / n;
    let mut grad = vec![0.0; pred.len()];
    let mut value = 0.0;
    for ((p, t), g) in pred
        .data()
        .chunks_exact(k)
        .zip(target.data().chunks_exact(k))
        .zip(grad.chunks_exact_mut(k))
    {
        let (a, b) = iou_sums(p, t)?;
        value += 1.0 - a / b;
        iou_grad(p, t, a, b, g);
        g.iter_mut().for_each(|v| *v = -*v / n as f64);
    }
    Ok(LossValue::new(value / n as f64, Tensor::from_parts(pred.shape().to_vec(), grad)))
}

/// Per-sample mean of the soft IoU.
pub fn mean_iou(pred: &Tensor, target: &Tensor) -> Result<f64> {
    Ok(1.0 - iou_loss(pred, target)?.value)
}

/// Weight of the inverse clinical loss for targets normalized to `[0.1, 0.9]`.
pub const CLINICAL_C: f64 = 0.9;

fn clinical(pred: &[f64], target: &[f64], c: Option<f64>, grad: &mut [f64]) -> Result<f64> {
    if target.iter().any(|&v| v < 0.0) {
        return Err(Error::Domain("clinical loss needs a nonnegative target".into()));
    }
    let s: f64 = target.iter().sum();
    if s <= 0.0 {
        return Err(Error::Domain("clinical loss needs a target with positive sum".into()));
    }
    let mut value = 0.0;
    for ((g, &y), &x) in grad.iter_mut().zip(pred).zip(target) {
        let w = match c {
            None => x / s,
            Some(c) => c - x / s,
        };
        let d = x - y;
        value += d * d * w;
        *g = -2.0 * d * w;
    }
    Ok(value)
}

fn clinical_batched(pred: &Tensor, target: &Tensor, c: Option<f64>) -> Result<LossValue> {
    pair(pred, target, "clinical loss")?;
    let n = samples(pred);
    let k = pred.len() / n;
    let mut grad = vec![0.0; pred.len()];
    let mut value = 0.0;
    for ((p, t), g) in pred
        .data()
        .chunks_exact(k)
        .zip(target.data().chunks_exact(k))
        .zip(grad.chunks_exact_mut(k))
    {
        value += clinical(p, t, c, g)?;
    }
    grad.iter_mut().for_each(|v| *v /= n as f64);
    Ok(LossValue::new(value / n as f64, Tensor::from_parts(pred.shape().to_vec(), grad)))
}

/// `Σ (X − Y)² · X/ΣX`: squared error weighted by the target's share of the total dose.
pub fn clinical_loss(pred: &Tensor, target: &Tensor) -> Result<LossValue> {
    clinical_batched(pred, target, None)
}

/// `Σ (X − Y)² · (c − X/ΣX)`, the oppositely weighted reference.
pub fn clinical_loss_inverse(pred: &Tensor, target: &Tensor, c: f64) -> Result<LossValue> {
    clinical_batched(pred, target, Some(c))
}

/// Loss or metric selectable by name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    Mae,
    Iou,
    EntropyLike,
    Clinical,
    ClinicalInv,
}

impl LossKind {
    pub fn evaluate(&self, pred: &Tensor, target: &Tensor) -> Result<LossValue> {
        match self {
            LossKind::Mse => mse(pred, target),
            LossKind::Mae => mae(pred, target),
            LossKind::Iou => iou_loss(pred, target),
            LossKind::EntropyLike => {
                let n = samples(pred) as f64;
                let mut l = entropy_like(pred, target)?;
                l.value /= n;
                l.grad = l.grad.map(|g| g.scale(1.0 / n));
                Ok(l)
            }
            LossKind::Clinical => clinical_loss(pred, target),
            LossKind::ClinicalInv => clinical_loss_inverse(pred, target, CLINICAL_C),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Mse => "mse",
            LossKind::Mae => "mae",
            LossKind::Iou => "iou",
            LossKind::EntropyLike => "entropy_like",
            LossKind::Clinical => "clinical",
            LossKind::ClinicalInv => "clinical_inv",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "mse" => LossKind::Mse,
            "mae" => LossKind::Mae,
            "iou" | "jaccard" => LossKind::Iou,
            "entropy_like" | "entropy" => LossKind::EntropyLike,
            "clinical" => LossKind::Clinical,
            "clinical_inv" => LossKind::ClinicalInv,
            _ => return Err(Error::arg(format!("unknown loss '{s}'"))),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn mse_mae_examples() {
        let x = t(&[0.3, -1.0, 2.0]);
        assert_eq!(mse(&x, &x).unwrap().value, 0.0);
        assert_eq!(mae(&x, &x).unwrap().value, 0.0);
        assert_eq!(mse(&t(&[0.0, 0.0]), &t(&[1.0, 3.0])).unwrap().value, 5.0);
        assert_eq!(mae(&t(&[0.0, 0.0]), &t(&[1.0, 3.0])).unwrap().value, 2.0);
        assert!(mse(&x, &t(&[1.0])).is_err());
    }

    #[test]
    fn mse_vs_mae_ordering() {
        let target = t(&[0.0; 4]);
        let small = t(&[0.1, -0.5, 0.9, 1.0]);
        assert!(mse(&small, &target).unwrap().value <= mae(&small, &target).unwrap().value);
        let large = t(&[1.0, -2.5, 3.0, 10.0]);
        assert!(mse(&large, &target).unwrap().value >= mae(&large, &target).unwrap().value);
    }

    #[test]
    fn kl_of_identical_is_zero() {
        let p = t(&[0.2, 0.3, 0.5]);
        assert_eq!(kl_divergence(&p, &p).unwrap().value, 0.0);
        assert!(kl_divergence(&t(&[0.0, 1.0]), &t(&[0.5, 0.5])).is_err());
        assert!(kl_divergence(&t(&[0.6, 0.6]), &t(&[0.5, 0.5])).is_err());
    }

    #[test]
    fn entropy_like_gradient() {
        let g = entropy_like(&t(&[0.5]), &t(&[0.5])).unwrap();
        assert_eq!(g.grad().data(), &[0.0]);
        let g = entropy_like(&t(&[0.25]), &t(&[0.75])).unwrap();
        assert!((g.grad().data()[0] - (0.25 - 0.75) / (0.25 * 0.75)).abs() < 1e-15);
        assert!(entropy_like(&t(&[1.0]), &t(&[0.5])).is_err());
        assert!(log_loss(&t(&[0.5]), &t(&[0.0])).is_err());
    }

    #[test]
    fn iou_examples() {
        let x = t(&[0.2, 0.8]);
        assert_eq!(soft_iou(&x, &x).unwrap(), 1.0);
        assert!((soft_iou(&x, &t(&[0.4, 0.4])).unwrap() - 0.5).abs() < 1e-15);
        assert!(soft_iou(&t(&[-0.1, 0.2]), &x).is_err());
        assert!(soft_iou(&t(&[0.0, 0.0]), &t(&[0.0, 0.0])).is_err());
    }

    #[test]
    fn iou_tie_gradient_is_branch_mean() {
        // p = {0.5, 0.2}, t = {0.5, 0.4}: Σmin = 0.7, Σmax = 0.9
        let l = iou_loss(&t(&[0.5, 0.2]), &t(&[0.5, 0.4])).unwrap();
        let up = 1.0 / 0.9;
        let down = -0.7 / 0.81;
        assert!((l.grad().data()[0] + 0.5 * (up + down)).abs() < 1e-12);
        assert!((l.grad().data()[1] + up).abs() < 1e-12);
    }

    #[test]
    fn clinical_examples() {
        let x = t(&[0.1, 0.5, 0.3]);
        assert_eq!(clinical_loss(&x, &x).unwrap().value, 0.0);
        assert_eq!(clinical_loss_inverse(&x, &x, 0.9).unwrap().value, 0.0);
        assert!(clinical_loss(&x, &t(&[0.0, 0.0, 0.0])).is_err());
    }

    #[test]
    fn loss_names_round_trip() {
        for k in [
            LossKind::Mse,
            LossKind::Mae,
            LossKind::Iou,
            LossKind::EntropyLike,
            LossKind::Clinical,
            LossKind::ClinicalInv,
        ] {
            assert_eq!(k.name().parse::<LossKind>().unwrap(), k);
        }
        assert!("hinge".parse::<LossKind>().is_err());
    }
}
