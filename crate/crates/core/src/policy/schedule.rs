//! Noise schedules, forward noising and the denoising update.
//!
//! Notation: `beta` is the per-step signal retention (close to 1), `gamma =
//! 1 - beta` the per-step noise, and `beta_bar(k)` the cumulative product of
//! `beta` up to `k` with `beta_bar(0) = 1`.
//!
//! Forward noising: `ã = √β̄ᵏ a₀ + √(1 − β̄ᵏ) ε`.
//!
//! Denoising update from step `k` to `k − 1`:
//!
//! ```text
//! aᵏ⁻¹ = √β̄ᵏ⁻¹ γᵏ / (1 − β̄ᵏ) · â₀ + √βᵏ (1 − β̄ᵏ⁻¹) / (1 − β̄ᵏ) · aᵏ + τᵏ v
//! ```
//!
//! At `k = 1` the first coefficient is exactly 1 and the second exactly 0,
//! because `1 − β̄` is accumulated directly rather than formed by subtraction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub kind: ScheduleKind,
    /// Smallest per-step noise `γ¹`.
    pub lo: f64,
    /// Largest per-step noise `γᴷ`.
    pub hi: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            kind: ScheduleKind::Linear,
            lo: 1e-3,
            hi: 0.2,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.kind, self.lo, self.hi)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    gamma: Vec<f64>,
    beta: Vec<f64>,
    /// `beta_bar[k]` for `k = 0..=K`.
    beta_bar: Vec<f64>,
    /// `1 − β̄ᵏ` accumulated as `c_k = c_{k−1} + β̄ᵏ⁻¹ γᵏ`.
    one_minus_beta_bar: Vec<f64>,
}

/// Interpolates `γ` between `lo` and `hi` over `k = 1..=K`.
pub fn make_schedule(steps: usize, kind: ScheduleKind, lo: f64, hi: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::invalid("schedule needs at least one step"));
    }
    if !(lo > 0.0 && lo <= hi && hi < 1.0) {
        return Err(Error::invalid(format!("noise bounds must satisfy 0 < lo <= hi < 1, got [{lo}, {hi}]")));
    }
    let gamma: Vec<f64> = (0..steps)
        .map(|i| {
            let t = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
            let w = match kind {
                ScheduleKind::Linear => t,
                ScheduleKind::Cosine => 0.5 * (1.0 - (std::f64::consts::PI * t).cos()),
            };
            lo + (hi - lo) * w
        })
        .collect();
    let beta: Vec<f64> = gamma.iter().map(|g| 1.0 - g).collect();
    let mut beta_bar = vec![1.0];
    let mut one_minus = vec![0.0];
    for (b, g) in beta.iter().zip(&gamma) {
        let prev = *beta_bar.last().unwrap();
        one_minus.push(one_minus.last().unwrap() + prev * g);
        beta_bar.push(prev * b);
    }
    Ok(NoiseSchedule {
        kind,
        gamma,
        beta,
        beta_bar,
        one_minus_beta_bar: one_minus,
    })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.gamma.len()
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// `βᵏ`, `1 ≤ k ≤ K`.
    pub fn beta(&self, k: usize) -> f64 {
        self.beta[k - 1]
    }

    /// `γᵏ`, `1 ≤ k ≤ K`.
    pub fn gamma(&self, k: usize) -> f64 {
        self.gamma[k - 1]
    }

    /// `β̄ᵏ`, `0 ≤ k ≤ K`.
    pub fn beta_bar(&self, k: usize) -> f64 {
        self.beta_bar[k]
    }

    /// `1 − β̄ᵏ`, `0 ≤ k ≤ K`.
    pub fn one_minus_beta_bar(&self, k: usize) -> f64 {
        self.one_minus_beta_bar[k]
    }

    fn check_step(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.steps() {
            return Err(Error::invalid(format!("step {k} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    /// Noise scale that makes the update the exact Gaussian posterior:
    /// `√(γᵏ (1 − β̄ᵏ⁻¹) / (1 − β̄ᵏ))`. Zero at `k = 1`.
    pub fn posterior_tau(&self, k: usize) -> f64 {
        (self.gamma(k) * self.one_minus_beta_bar(k - 1) / self.one_minus_beta_bar(k)).sqrt()
    }

    /// Coefficients `(c₀, c_k)` of `â₀` and `aᵏ` in the update.
    pub fn step_coefficients(&self, k: usize) -> (f64, f64) {
        let denom = self.one_minus_beta_bar(k);
        assert!(denom > 0.0, "1 - beta_bar must be positive for k >= 1");
        (
            self.beta_bar(k - 1).sqrt() * self.gamma(k) / denom,
            self.beta(k).sqrt() * self.one_minus_beta_bar(k - 1) / denom,
        )
    }
}

fn check_shapes(a: &Mat, b: &Mat, what: &str) -> Result<()> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::invalid(format!(
            "{what}: shape {}x{} vs {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    Ok(())
}

/// `√β̄ᵏ a₀ + √(1 − β̄ᵏ) ε`.
pub fn forward_noise(a0: &Mat, k: usize, eps: &Mat, schedule: &NoiseSchedule) -> Result<Mat> {
    schedule.check_step(k)?;
    check_shapes(a0, eps, "forward_noise")?;
    let (s, n) = (schedule.beta_bar(k).sqrt(), schedule.one_minus_beta_bar(k).sqrt());
    let data = a0.as_slice().iter().zip(eps.as_slice()).map(|(a, e)| s * a + n * e).collect();
    Ok(Mat::from_vec(a0.rows(), a0.cols(), data))
}

/// One denoising update from `aᵏ` to `aᵏ⁻¹`. `v` is ignored when
/// `tau_k == 0`.
pub fn ddim_step(a_k: &Mat, a0_pred: &Mat, k: usize, schedule: &NoiseSchedule, tau_k: f64, v: &Mat) -> Result<Mat> {
    schedule.check_step(k)?;
    check_shapes(a_k, a0_pred, "ddim_step")?;
    if !(tau_k >= 0.0) {
        return Err(Error::invalid(format!("tau_k must be non-negative, got {tau_k}")));
    }
    let (c0, ck) = schedule.step_coefficients(k);
    let mut out = Mat::zeros(a_k.rows(), a_k.cols());
    for (i, o) in out.as_mut_slice().iter_mut().enumerate() {
        *o = c0 * a0_pred.as_slice()[i] + ck * a_k.as_slice()[i];
    }
    if tau_k > 0.0 {
        check_shapes(a_k, v, "ddim_step noise")?;
        for (o, n) in out.as_mut_slice().iter_mut().zip(v.as_slice()) {
            *o += tau_k * n;
        }
    }
    Ok(out)
}
