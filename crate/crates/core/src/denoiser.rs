//! The scalar Gauss-Bernoulli denoiser.
//!
//! For a prior `P₀` and a Gaussian field `(R, Σ²)` the tilted distribution
//! `Q(x) ∝ P₀(x) exp(−(x−R)²/2Σ²)` is a two-component mixture: a spike at
//! zero and a Gaussian with mean `R·g/(g+Σ²)` and variance `Σ²·g/(g+Σ²)`,
//! where `g` is the slab variance. Everything here is closed form; mixture
//! weights go through a log-sum-exp of the two component evidences.
//!
//! The normalization `Z(R, Σ²) = ∫ P₀(x) exp(−(x−R)²/2Σ²) dx` does not carry
//! the `1/√(2πΣ²)` factor.

use crate::error::{Error, Result};
use crate::model::PriorParams;

/// Smallest `Σ²` the denoiser evaluates at; smaller inputs are clamped.
pub const SIGMA2_FLOOR: f64 = 1e-14;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalarPosterior {
    /// `log Z(R, Σ²)`
    pub log_z: f64,
    /// `f_a(R, Σ²)`
    pub mean: f64,
    /// `f_c(R, Σ²)`
    pub var: f64,
}

/// Posterior summary plus the higher central moments that the free-energy
/// gradients need (`∂f_c/∂R = κ₃/Σ²` and friends).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PosteriorMoments {
    pub log_z: f64,
    pub mean: f64,
    pub var: f64,
    /// Third central moment `E[(x − a)³]`.
    pub third: f64,
    /// `Var[(x − a)²] = E[(x − a)⁴] − c²`.
    pub var_sq_dev: f64,
    /// `D_KL(Q ‖ P₀)`, equal to `−log Z − (c + (a − R)²)/2Σ²`.
    pub kl: f64,
}

impl PosteriorMoments {
    pub fn posterior(&self) -> ScalarPosterior {
        ScalarPosterior {
            log_z: self.log_z,
            mean: self.mean,
            var: self.var,
        }
    }
}

/// A separable prior seen through its Gaussian-field posterior.
///
/// Implementations take `sigma2 > 0`; callers are expected to validate.
pub trait ScalarDenoiser: Sync {
    fn moments(&self, r: f64, sigma2: f64) -> PosteriorMoments;

    fn posterior(&self, r: f64, sigma2: f64) -> ScalarPosterior {
        self.moments(r, sigma2).posterior()
    }

    /// Variance assigned to an unobserved coefficient.
    fn prior_variance(&self) -> f64;
}

/// `ln(1 + eˣ)` without overflow.
#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl ScalarDenoiser for PriorParams {
    fn moments(&self, r: f64, sigma2: f64) -> PosteriorMoments {
        let s2 = sigma2.max(SIGMA2_FLOOR);
        let g = self.gaussian_var;
        let (ln_rho, ln_1m_rho) = (self.rho.ln(), (-self.rho).ln_1p());
        let half_ln_shrink = -0.5 * (g / s2).ln_1p();
        // Log-odds of the slab against the spike.
        let odds = ln_rho - ln_1m_rho + half_ln_shrink + r * r * g / (2.0 * s2 * (g + s2));
        let log_z = if odds > 0.0 {
            ln_rho + half_ln_shrink - r * r / (2.0 * (g + s2)) + softplus(-odds)
        } else {
            ln_1m_rho - r * r / (2.0 * s2) + softplus(odds)
        };
        let ln_w1 = -softplus(-odds);
        let ln_w0 = -softplus(odds);
        let w1 = ln_w1.exp();
        let w0 = ln_w0.exp();

        let m = r * g / (g + s2);
        let v = s2 * g / (g + s2);
        let m2 = m * m;
        let mean = w1 * m;
        let var = w1 * v + w0 * w1 * m2;
        let third = w0 * w1 * m * (m2 * (w0 - w1) + 3.0 * v);
        let var_sq_dev = w0 * w1 * m2 * m2 * (w0 - w1) * (w0 - w1)
            + 2.0 * w0 * w1 * m2 * v * (3.0 * w0 - w1)
            + w1 * v * v * (3.0 - w1);

        // KL(Q‖P₀) split over the two components; the slab part is
        // KL(N(m, v) ‖ N(0, g)).
        let mut kl = 0.0;
        if w0 > 0.0 {
            kl += w0 * (ln_w0 - ln_1m_rho);
        }
        if w1 > 0.0 {
            let x = g / s2;
            let slab = 0.5 * (m2 / g + x.ln_1p() - x / (1.0 + x));
            kl += w1 * (ln_w1 - ln_rho + slab);
        }
        PosteriorMoments {
            log_z,
            mean,
            var,
            third,
            var_sq_dev,
            kl,
        }
    }

    fn prior_variance(&self) -> f64 {
        self.second_moment()
    }
}

fn check_sigma2(sigma2: f64) -> Result<()> {
    if sigma2 > 0.0 && sigma2.is_finite() {
        Ok(())
    } else {
        Err(Error::param(format!("Σ² = {sigma2} must be positive and finite")))
    }
}

/// `log Z`, `f_a` and `f_c` at `(R, Σ²)`.
pub fn scalar_posterior(prior: &PriorParams, r: f64, sigma2: f64) -> Result<ScalarPosterior> {
    check_sigma2(sigma2)?;
    Ok(prior.posterior(r, sigma2))
}

/// `∂ log Z / ∂R = (f_a − R)/Σ²`.
pub fn dlogz_dr(prior: &PriorParams, r: f64, sigma2: f64) -> Result<f64> {
    let p = scalar_posterior(prior, r, sigma2)?;
    Ok((p.mean - r) / sigma2.max(SIGMA2_FLOOR))
}

/// `∂ log Z / ∂Σ² = ((f_a − R)² + f_c) / 2Σ⁴`.
pub fn dlogz_dsigma2(prior: &PriorParams, r: f64, sigma2: f64) -> Result<f64> {
    let p = scalar_posterior(prior, r, sigma2)?;
    let s2 = sigma2.max(SIGMA2_FLOOR);
    let d = p.mean - r;
    Ok((d * d + p.var) / (2.0 * s2 * s2))
}

/// The thresholding function `η_Δ(x) = f_a(x, Δ)`.
pub fn threshold_eta(prior: &PriorParams, x: f64, delta: f64) -> Result<f64> {
    Ok(scalar_posterior(prior, x, delta)?.mean)
}
