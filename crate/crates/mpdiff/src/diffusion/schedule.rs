//! β/α/ᾱ tables and the closed-form forward corruption.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fields::Field2D;

/// Guard below which Tweedie inversion refuses to divide by √ᾱ_t.
const ALPHA_BAR_GUARD: f64 = 1e-8;

/// Variance tables for a `T`-step diffusion. `t` is 1-based; `alpha_bar(0)`
/// is 1 by convention.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced β_1..β_T with derived α and ᾱ tables.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::RejectedInput("schedule needs at least 2 steps".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::RejectedInput(format!(
                "invalid beta range [{beta_start}, {beta_end}]"
            )));
        }
        let denom = (steps - 1) as f64;
        let betas: Vec<f64> = (0..steps)
            .map(|t| beta_start + (beta_end - beta_start) * t as f64 / denom)
            .collect();
        let sched = Self::from_betas(betas)?;
        for t in 1..=steps {
            if !(sched.alpha_bar(t) < sched.alpha_bar(t - 1)) {
                return Err(Error::RejectedInput(format!(
                    "alpha_bar not strictly decreasing at step {t}"
                )));
            }
        }
        Ok(sched)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.len() < 2 {
            return Err(Error::RejectedInput("schedule needs at least 2 steps".into()));
        }
        if betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::RejectedInput("every beta must lie in (0, 1)".into()));
        }
        let alpha: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(betas.len());
        let mut prod = 1.0;
        for a in &alpha {
            prod *= a;
            alpha_bar.push(prod);
        }
        Ok(Self { beta: betas, alpha, alpha_bar })
    }

    /// Desk-scale default: T = 200 with β ∈ [1e-4, 0.1], which leaves
    /// ᾱ_T ≈ 3.2e-5 so the terminal state is effectively white noise.
    pub fn default_desk() -> Self {
        Self::linear(200, 1e-4, 0.1).expect("default schedule is valid")
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    /// β_t for 1-based `t`.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// ᾱ_t with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.steps() {
            return Err(Error::RejectedInput(format!(
                "step {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    /// Hex digest of the tables, recorded in run manifests.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for b in &self.beta {
            hasher.update(b.to_le_bytes());
        }
        format!("{:x}", hasher.finalize())
    }
}

/// Closed-form forward corruption: `√ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
///
/// `t = 0` is accepted as the identity (`ᾱ_0 = 1`); the noise is supplied by
/// the caller so tests stay deterministic.
pub fn forward_diffuse(
    x0: &Field2D,
    t: usize,
    eps: &Field2D,
    sched: &NoiseSchedule,
) -> Result<Field2D> {
    if t > sched.steps() {
        return Err(Error::RejectedInput(format!(
            "step {t} outside 0..={}",
            sched.steps()
        )));
    }
    if !x0.same_shape(eps) {
        return Err(Error::RejectedInput("noise shape must match x0".into()));
    }
    let ab = sched.alpha_bar(t);
    Ok(x0.scaled(ab.sqrt()).add_scaled(eps, (1.0 - ab).sqrt()))
}

/// Tweedie point estimate of the clean sample: `(x_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t`.
pub fn tweedie_x0hat(
    x_t: &Field2D,
    eps_hat: &Field2D,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Field2D> {
    sched.check_step(t)?;
    if !x_t.same_shape(eps_hat) {
        return Err(Error::RejectedInput("eps shape must match x_t".into()));
    }
    let ab = sched.alpha_bar(t);
    if ab < ALPHA_BAR_GUARD {
        return Err(Error::NumericalGuard(format!(
            "alpha_bar {ab:.3e} below {ALPHA_BAR_GUARD:.0e} at step {t}"
        )));
    }
    Ok(x_t.add_scaled(eps_hat, -(1.0 - ab).sqrt()).scaled(1.0 / ab.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_step_half_betas() {
        let s = NoiseSchedule::from_betas(vec![0.5, 0.5]).unwrap();
        assert!((s.alpha_bar(1) - 0.5).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn degenerate_and_invalid_ranges_rejected() {
        assert!(NoiseSchedule::linear(10, 0.0, 0.0).is_err());
        assert!(NoiseSchedule::linear(10, 0.2, 0.1).is_err());
        assert!(NoiseSchedule::linear(10, 1e-4, 1.0).is_err());
        assert!(NoiseSchedule::linear(1, 1e-4, 0.1).is_err());
    }

    #[test]
    fn cumulative_product_oracle() {
        // Direct-product oracle over the documented desk range and the default.
        let check = |steps: usize, b0: f64, b1: f64| -> f64 {
            let s = NoiseSchedule::linear(steps, b0, b1).unwrap();
            let mut prod = 1.0;
            for t in 1..=steps {
                prod *= 1.0 - (b0 + (b1 - b0) * (t - 1) as f64 / (steps - 1) as f64);
            }
            assert!((s.alpha_bar(steps) - prod).abs() < 1e-15);
            prod
        };
        let ab_005 = check(200, 1e-4, 0.05);
        assert!((ab_005 - 6.121965241292829e-3).abs() < 1e-12);
        let ab_default = check(200, 1e-4, 0.1);
        assert!(ab_default < 1e-3, "default schedule must end near white noise");
        assert!((NoiseSchedule::default_desk().alpha_bar(200) - ab_default).abs() < 1e-15);
    }

    #[test]
    fn recurrences_hold() {
        let s = NoiseSchedule::default_desk();
        for t in 1..=s.steps() {
            assert!((s.alpha(t) - (1.0 - s.beta(t))).abs() <= 1e-12);
            assert!((s.alpha_bar(t) - s.alpha_bar(t - 1) * s.alpha(t)).abs() <= 1e-12);
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
    }

    #[test]
    fn forward_diffuse_limits_and_value() {
        let s = NoiseSchedule::from_betas(vec![0.5, 0.5]).unwrap();
        let x0 = Field2D::constant(2, 2, 2.0);
        let eps = Field2D::constant(2, 2, 1.0);
        // t = 0 convention: no corruption
        let f0 = forward_diffuse(&x0, 0, &eps, &s).unwrap();
        assert_eq!(f0, x0);
        // zero signal
        let fz = forward_diffuse(&Field2D::zeros(2, 2), 2, &eps, &s).unwrap();
        assert!(fz.data().iter().all(|v| (v - 0.75f64.sqrt()).abs() < 1e-12));
        // alpha_bar = 0.25: 0.5*2 + sqrt(0.75)*1
        let f = forward_diffuse(&x0, 2, &eps, &s).unwrap();
        let expect = 1.0 + 0.75f64.sqrt();
        assert!((f.get(0, 0) - expect).abs() < 1e-12);
        assert!((expect - 1.8660254).abs() < 1e-6);
        assert!(forward_diffuse(&x0, 3, &eps, &s).is_err());
    }

    #[test]
    fn tweedie_examples_and_guard() {
        let s = NoiseSchedule::from_betas(vec![0.5, 0.5]).unwrap();
        // x_t = 1.0, eps = 0.5, alpha_bar = 0.25
        let x_t = Field2D::constant(1, 1, 1.0);
        let eps = Field2D::constant(1, 1, 0.5);
        let x0 = tweedie_x0hat(&x_t, &eps, 2, &s).unwrap();
        let expect = (1.0 - 0.75f64.sqrt() * 0.5) / 0.5;
        assert!((x0.get(0, 0) - expect).abs() < 1e-12);
        assert!((expect - 1.1339746).abs() < 1e-6);

        let tiny = NoiseSchedule::from_betas(vec![0.5; 30]).unwrap();
        assert!(tiny.alpha_bar(30) < 1e-8);
        assert!(matches!(
            tweedie_x0hat(&x_t, &eps, 30, &tiny),
            Err(Error::NumericalGuard(_))
        ));
    }

    #[test]
    fn tweedie_inverts_forward_diffuse() {
        let s = NoiseSchedule::default_desk();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for t in [1, 3, 57, 120, 200] {
            let x0 = Field2D::from_fn(4, 3, |_, _| rng.gen_range(-1.0..1.0));
            let eps = Field2D::from_fn(4, 3, |_, _| rng.gen_range(-1.0..1.0));
            let x_t = forward_diffuse(&x0, t, &eps, &s).unwrap();
            let back = tweedie_x0hat(&x_t, &eps, t, &s).unwrap();
            for (a, b) in x0.data().iter().zip(back.data()) {
                assert!((a - b).abs() <= 1e-10);
            }
        }
    }
}
