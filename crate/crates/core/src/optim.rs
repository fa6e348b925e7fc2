//! Parameter updates: SGD, classical momentum, Nesterov momentum, ADAM and NADAM,
//! plus L1/L2 weight penalties.
//!
//! The free `*_step` functions update one flat parameter slice in place.
//! [`Optimizer`] owns the per-parameter buffers and the step counter for a whole network.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Param;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub enum RegSpec {
    #[default]
    None,
    L1(f64),
    L2(f64),
}

impl RegSpec {
    pub fn strength(&self) -> f64 {
        match *self {
            RegSpec::None => 0.0,
            RegSpec::L1(g) | RegSpec::L2(g) => g,
        }
    }

    /// `γ·Σ|θ|` or `γ·Σθ²`.
    pub fn penalty(&self, theta: &[f64]) -> f64 {
        match *self {
            RegSpec::None => 0.0,
            RegSpec::L1(g) => g * theta.iter().map(|v| v.abs()).sum::<f64>(),
            RegSpec::L2(g) => g * theta.iter().map(|v| v * v).sum::<f64>(),
        }
    }
}

/// Adds the penalty gradient: `2γθ` for L2, `γ·sign(θ)` (with `sign(0) = 0`) for L1.
pub fn apply_regularization(grad: &mut [f64], theta: &[f64], reg: RegSpec) -> Result<()> {
    if grad.len() != theta.len() {
        return Err(Error::shape("gradient and parameter lengths differ"));
    }
    let g = reg.strength();
    if !(g >= 0.0) || !g.is_finite() {
        return Err(Error::arg(format!("regularization strength must be >= 0, got {g}")));
    }
    match reg {
        RegSpec::None => {}
        RegSpec::L1(g) => {
            for (d, &t) in grad.iter_mut().zip(theta) {
                let s = if t > 0.0 {
                    1.0
                } else if t < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                *d += g * s;
            }
        }
        RegSpec::L2(g) => {
            for (d, &t) in grad.iter_mut().zip(theta) {
                *d += 2.0 * g * t;
            }
        }
    }
    Ok(())
}

fn check(theta: &[f64], g: &[f64]) -> Result<()> {
    if theta.len() != g.len() {
        return Err(Error::shape("gradient and parameter lengths differ"));
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    Ok(())
}

/// `θ ← θ − η·g`
pub fn sgd_step(theta: &mut [f64], g: &[f64], lr: f64) -> Result<()> {
    check(theta, g)?;
    for (t, d) in theta.iter_mut().zip(g) {
        *t -= lr * d;
    }
    Ok(())
}

/// `m ← μ·m + g`, `θ ← θ − η·m`
pub fn momentum_step(theta: &mut [f64], g: &[f64], m: &mut [f64], lr: f64, mu: f64) -> Result<()> {
    check(theta, g)?;
    for ((t, d), mk) in theta.iter_mut().zip(g).zip(m.iter_mut()) {
        *mk = mu * *mk + d;
        *t -= lr * *mk;
    }
    Ok(())
}

/// Single-evaluation Nesterov: with `g` taken at the current `θ`,
/// `m ← μ_t·m + α·g`, `θ ← θ − (μ_{t+1}·m + α·g)`.
///
/// The iterate tracked here is the lookahead point `θ − μ·m` of the textbook form.
pub fn nesterov_step(
    theta: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    lr: f64,
    mu_t: f64,
    mu_next: f64,
) -> Result<()> {
    check(theta, g)?;
    for ((t, d), mk) in theta.iter_mut().zip(g).zip(m.iter_mut()) {
        *mk = mu_t * *mk + lr * d;
        *t -= mu_next * *mk + lr * d;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One ADAM step at step index `t ≥ 1`.
pub fn adam_step(theta: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], t: u64, p: AdamParams) -> Result<()> {
    check(theta, g)?;
    if t == 0 {
        return Err(Error::arg("adam step index starts at 1"));
    }
    let c1 = 1.0 - p.beta1.powi(t as i32);
    let c2 = 1.0 - p.beta2.powi(t as i32);
    for i in 0..theta.len() {
        m[i] = p.beta1 * m[i] + (1.0 - p.beta1) * g[i];
        v[i] = p.beta2 * v[i] + (1.0 - p.beta2) * (g[i] * g[i]);
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        theta[i] -= p.lr * m_hat / (v_hat.sqrt() + p.epsilon);
    }
    Ok(())
}

/// Momentum factors and their running products for one NADAM step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NadamCoefficients {
    pub mu_t: f64,
    pub mu_next: f64,
    /// `Π_{i≤t} μ_i`
    pub prod_t: f64,
    /// `Π_{i≤t+1} μ_i`
    pub prod_next: f64,
}

/// One NADAM step at step index `t ≥ 1`:
///
/// ```text
/// m ← μ_t·m + (1−μ_t)·g
/// n ← ν·n + (1−ν)·g²
/// m̂ = μ_{t+1}·m/(1 − Π_{t+1}) + (1−μ_t)·g/(1 − Π_t)
/// n̂ = ν·n/(1 − ν^t)
/// θ ← θ − α·m̂/(√n̂ + ε)
/// ```
#[allow(clippy::too_many_arguments)]
pub fn nadam_step(
    theta: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    n: &mut [f64],
    t: u64,
    c: NadamCoefficients,
    nu: f64,
    lr: f64,
    epsilon: f64,
) -> Result<()> {
    check(theta, g)?;
    if t == 0 {
        return Err(Error::arg("nadam step index starts at 1"));
    }
    if !(c.mu_t < 1.0 && c.mu_next < 1.0) {
        return Err(Error::Domain(format!(
            "nadam momentum must stay below 1, got {} / {}",
            c.mu_t, c.mu_next
        )));
    }
    let cn = 1.0 - nu.powi(t as i32);
    for i in 0..theta.len() {
        m[i] = c.mu_t * m[i] + (1.0 - c.mu_t) * g[i];
        n[i] = nu * n[i] + (1.0 - nu) * (g[i] * g[i]);
        let m_hat = c.mu_next * m[i] / (1.0 - c.prod_next) + (1.0 - c.mu_t) * g[i] / (1.0 - c.prod_t);
        let n_hat = nu * n[i] / cn;
        theta[i] -= lr * m_hat / (n_hat.sqrt() + epsilon);
    }
    Ok(())
}

/// Momentum factor per step index.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum MuSchedule {
    Constant(f64),
    /// `μ_t = μ·(1 − ½·base^(t/period))`, ramping up to `μ`.
    Warmup { mu: f64, base: f64, period: f64 },
}

impl MuSchedule {
    pub fn at(&self, t: u64) -> f64 {
        match *self {
            MuSchedule::Constant(mu) => mu,
            MuSchedule::Warmup { mu, base, period } => mu * (1.0 - 0.5 * base.powf(t as f64 / period)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Momentum,
    Nesterov,
    Adam,
    Nadam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "sgd" => OptimizerKind::Sgd,
            "momentum" => OptimizerKind::Momentum,
            "nesterov" => OptimizerKind::Nesterov,
            "adam" => OptimizerKind::Adam,
            "nadam" => OptimizerKind::Nadam,
            _ => return Err(Error::arg(format!("unknown optimizer '{s}'"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub mu: MuSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub nu: f64,
    pub epsilon: f64,
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        OptimizerConfig {
            kind,
            lr,
            mu: MuSchedule::Constant(0.9),
            beta1: 0.9,
            beta2: 0.999,
            nu: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::arg(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2), ("nu", self.nu)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::arg(format!("{name} must be in [0, 1), got {v}")));
            }
        }
        let mu = match self.mu {
            MuSchedule::Constant(m) => m,
            MuSchedule::Warmup { mu, base, period } => {
                if !(base > 0.0 && base <= 1.0 && period > 0.0) {
                    return Err(Error::arg("warmup needs base in (0, 1] and period > 0"));
                }
                mu
            }
        };
        if !(0.0..1.0).contains(&mu) {
            return Err(Error::arg(format!("momentum must be in [0, 1), got {mu}")));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::arg("epsilon must be >= 0"));
        }
        Ok(())
    }
}

/// Per-parameter moment buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Slot {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    /// Completed steps.
    pub t: u64,
    /// `Π_{i≤t} μ_i`
    pub mu_product: f64,
    pub slots: Vec<Slot>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Optimizer {
            config,
            t: 0,
            mu_product: 1.0,
            slots: Vec::new(),
        })
    }

    /// Applies one step to every parameter, in iteration order.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Param>) -> Result<()> {
        let params: Vec<&mut Param> = params.into_iter().collect();
        if self.slots.is_empty() {
            self.slots = params
                .iter()
                .map(|p| Slot {
                    first: vec![0.0; p.value.len()],
                    second: vec![0.0; p.value.len()],
                })
                .collect();
        }
        if self.slots.len() != params.len()
            || self.slots.iter().zip(&params).any(|(s, p)| s.first.len() != p.value.len())
        {
            return Err(Error::shape("optimizer state does not match parameters"));
        }
        let t = self.t + 1;
        let c = &self.config;
        let mu_t = c.mu.at(t);
        let mu_next = c.mu.at(t + 1);
        let coeffs = NadamCoefficients {
            mu_t,
            mu_next,
            prod_t: self.mu_product * mu_t,
            prod_next: self.mu_product * mu_t * mu_next,
        };
        for (p, s) in params.into_iter().zip(self.slots.iter_mut()) {
            let g = p.grad.data();
            let theta = p.value.data_mut();
            match c.kind {
                OptimizerKind::Sgd => sgd_step(theta, g, c.lr)?,
                OptimizerKind::Momentum => momentum_step(theta, g, &mut s.first, c.lr, mu_t)?,
                OptimizerKind::Nesterov => nesterov_step(theta, g, &mut s.first, c.lr, mu_t, mu_next)?,
                OptimizerKind::Adam => adam_step(
                    theta,
                    g,
                    &mut s.first,
                    &mut s.second,
                    t,
                    AdamParams {
                        lr: c.lr,
                        beta1: c.beta1,
                        beta2: c.beta2,
                        epsilon: c.epsilon,
                    },
                )?,
                OptimizerKind::Nadam => {
                    nadam_step(theta, g, &mut s.first, &mut s.second, t, coeffs, c.nu, c.lr, c.epsilon)?
                }
            }
            if theta.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("{} after update", p.name)));
            }
        }
        self.t = t;
        self.mu_product = coeffs.prod_t;
        Ok(())
    }

    /// Inverse of [`Optimizer::state_tensors`]. Either every parameter has both
    /// buffers or none does (an optimizer that has not stepped yet).
    pub fn restore_state(&mut self, names: &[String], lookup: impl Fn(&str) -> Option<Tensor>) -> Result<()> {
        let mut slots = Vec::with_capacity(names.len());
        for name in names {
            let m = lookup(&format!("opt/{name}/m"));
            let v = lookup(&format!("opt/{name}/v"));
            match (m, v) {
                (Some(m), Some(v)) if m.len() == v.len() => slots.push(Slot {
                    first: m.into_data(),
                    second: v.into_data(),
                }),
                (None, None) => slots.push(Slot {
                    first: Vec::new(),
                    second: Vec::new(),
                }),
                _ => return Err(Error::Format(format!("incomplete optimizer state for {name}"))),
            }
        }
        let filled = slots.iter().filter(|s| !s.first.is_empty()).count();
        if filled == 0 {
            self.slots.clear();
        } else if filled == slots.len() {
            self.slots = slots;
        } else {
            return Err(Error::Format("optimizer state covers only some parameters".into()));
        }
        Ok(())
    }

    /// Buffers as named tensors, e.g. for checkpoints.
    pub fn state_tensors(&self, names: &[String]) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (s, name) in self.slots.iter().zip(names) {
            if s.first.is_empty() {
                continue;
            }
            out.push((format!("opt/{name}/m"), Tensor::from_parts(vec![s.first.len()], s.first.clone())));
            out.push((format!("opt/{name}/v"), Tensor::from_parts(vec![s.second.len()], s.second.clone())));
        }
        out
    }
}
