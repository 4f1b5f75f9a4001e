//! Mean-field and Bethe free energies, their gradients, the noise-variance
//! update and the generic-channel (GAMP) functionals.
//!
//! All constrained energies share one structure: a KL term in the trial
//! parameters plus a data term `E(a, c)` that sees the coefficients only
//! through the posterior means and variances. Gradients in `(R, log Σ²)`
//! follow from `∂E/∂a`, `∂E/∂c` and the moment derivatives
//!
//! ```text
//! ∂a/∂R  = c/Σ²                    ∂c/∂R  = κ₃/Σ²
//! ∂a/∂Σ² = (κ₃ + 2c(a−R))/2Σ⁴      ∂c/∂Σ² = (Var[(x−a)²] + 2(a−R)κ₃)/2Σ⁴
//! ```

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::denoiser::{PosteriorMoments, ScalarDenoiser, SIGMA2_FLOOR};
use crate::error::{Error, Result};
use crate::linalg::{dot, norm_sq};
use crate::model::{channel_log_likelihood, Instance, Moments, OutputChannel, PriorParams, VarParams};

/// Lower bound applied to every learned or derived noise variance.
pub const DELTA_FLOOR: f64 = 1e-12;

/// Free-energy value with its gradient in `(R, log Σ²)` and, when the
/// noise variance is a variable, in `log Δ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub value: f64,
    pub grad_r: Vec<f64>,
    pub grad_log_sigma2: Vec<f64>,
    pub grad_log_delta: Option<f64>,
}

/// Per-measurement GAMP quantities.
#[derive(Clone, Debug, PartialEq)]
pub struct GampState {
    pub v: Vec<f64>,
    pub omega: Vec<f64>,
    pub gout: Vec<f64>,
    pub dgout: Vec<f64>,
}

/// Denoiser output at every coefficient, with `Σ²` clamped to the floor.
struct Constrained {
    moments: Vec<PosteriorMoments>,
    sigma2: Vec<f64>,
}

impl Constrained {
    fn new(prior: &PriorParams, params: &VarParams) -> Self {
        let sigma2: Vec<f64> = params.sigma2.iter().map(|s| s.max(SIGMA2_FLOOR)).collect();
        let moments = params
            .r
            .iter()
            .zip(&sigma2)
            .map(|(&r, &s2)| prior.moments(r, s2))
            .collect();
        Constrained { moments, sigma2 }
    }

    fn a(&self) -> Vec<f64> {
        self.moments.iter().map(|m| m.mean).collect()
    }

    fn c(&self) -> Vec<f64> {
        self.moments.iter().map(|m| m.var).collect()
    }

    fn kl(&self) -> f64 {
        self.moments.iter().map(|m| m.kl).sum()
    }

    /// Chain rule from `(∂E/∂a, ∂E/∂c)` to `(∂F/∂R, ∂F/∂log Σ²)` for
    /// `F = KL + E`.
    fn gradient(&self, params: &VarParams, e_a: &[f64], e_c: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = self.moments.len();
        let mut g_r = Vec::with_capacity(n);
        let mut g_s = Vec::with_capacity(n);
        for i in 0..n {
            let pm = &self.moments[i];
            let s2 = self.sigma2[i];
            let d = pm.mean - params.r[i];
            let ea = e_a[i] - d / s2;
            let ec = e_c[i] - 0.5 / s2;
            g_r.push((ea * pm.var + ec * pm.third) / s2);
            if params.sigma2[i] < SIGMA2_FLOOR {
                // Energy is flat in Σ² below the clamp.
                g_s.push(0.0);
            } else {
                g_s.push((ea * (pm.third + 2.0 * pm.var * d) + ec * (pm.var_sq_dev + 2.0 * d * pm.third)) / (2.0 * s2));
            }
        }
        (g_r, g_s)
    }
}

/// Posterior means and variances implied by the trial parameters.
pub fn moments_of(prior: &PriorParams, params: &VarParams) -> Moments {
    let (a, c) = params
        .r
        .iter()
        .zip(&params.sigma2)
        .map(|(&r, &s2)| {
            let p = prior.posterior(r, s2);
            (p.mean, p.var)
        })
        .unzip();
    Moments { a, c }
}

/// `−Σ_i [log Z(R_i, Σ_i²) + (c_i + (a_i − R_i)²)/2Σ_i²]`, the divergence
/// of the factorized trial distribution from the prior.
pub fn kl_to_prior(prior: &PriorParams, params: &VarParams) -> Result<f64> {
    prior.validate()?;
    params.validate(params.r.len())?;
    Ok(Constrained::new(prior, params).kl())
}

fn check(instance: &Instance, params: &VarParams) -> Result<()> {
    params.validate(instance.n())
}

/// Mean-field free energy
/// `(M/2) log 2πΔ + KL + (1/2Δ) Σ_μ [(y_μ − (Fa)_μ)² + (F²c)_μ]`.
pub fn mf_energy(instance: &Instance, params: &VarParams) -> Result<EnergyReport> {
    check(instance, params)?;
    let delta = params.delta;
    let m = instance.m() as f64;
    let st = Constrained::new(instance.prior(), params);
    let (a, c) = (st.a(), st.c());
    let resid = instance.residual(&a);
    let d = instance.col_sq();
    let spread = norm_sq(&resid) + dot(d, &c);
    let value = 0.5 * m * (2.0 * PI * delta).ln() + st.kl() + spread / (2.0 * delta);

    let e_a: Vec<f64> = instance.ft().mul_vec(&resid).iter().map(|v| -v / delta).collect();
    let e_c: Vec<f64> = d.iter().map(|v| v / (2.0 * delta)).collect();
    let (grad_r, grad_log_sigma2) = st.gradient(params, &e_a, &e_c);
    Ok(EnergyReport {
        value,
        grad_r,
        grad_log_sigma2,
        grad_log_delta: Some(0.5 * m - spread / (2.0 * delta)),
    })
}

/// Bethe free energy
/// `Σ_μ (y_μ − (Fa)_μ)²/2Δ + (M/2) log 2πΔ + ½ Σ_μ log(1 + (F²c)_μ/Δ) + KL`.
pub fn bethe_energy(instance: &Instance, params: &VarParams) -> Result<EnergyReport> {
    check(instance, params)?;
    let delta = params.delta;
    let m = instance.m() as f64;
    let st = Constrained::new(instance.prior(), params);
    let (a, c) = (st.a(), st.c());
    let resid = instance.residual(&a);
    let v = instance.f_sq().mul_vec(&c);
    let rss = norm_sq(&resid);
    let log_terms: f64 = v.iter().map(|vm| (vm / delta).ln_1p()).sum();
    let value = rss / (2.0 * delta) + 0.5 * m * (2.0 * PI * delta).ln() + 0.5 * log_terms + st.kl();

    let e_a: Vec<f64> = instance.ft().mul_vec(&resid).iter().map(|x| -x / delta).collect();
    let inv: Vec<f64> = v.iter().map(|vm| 0.5 / (delta + vm)).collect();
    let e_c = instance.f_sq().tmul_vec(&inv);
    let (grad_r, grad_log_sigma2) = st.gradient(params, &e_a, &e_c);
    let dv: f64 = v.iter().map(|vm| vm / (delta + vm)).sum();
    let grad_log_delta = -rss / (2.0 * delta) + 0.5 * m - 0.5 * dv;
    Ok(EnergyReport {
        value,
        grad_r,
        grad_log_sigma2,
        grad_log_delta: Some(grad_log_delta),
    })
}

/// Stationary noise variance of the mean-field energy,
/// `(1/M)‖y − Fa‖² + (1/M)‖F²c‖₁`, floored at [`DELTA_FLOOR`].
pub fn learn_delta(instance: &Instance, moments: &Moments) -> f64 {
    let resid = instance.residual(&moments.a);
    let spread = dot(instance.col_sq(), &moments.c);
    ((norm_sq(&resid) + spread) / instance.m() as f64).max(DELTA_FLOOR)
}

#[inline]
fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `log 𝒵`, `g_out` and `∂_ω g_out` for one measurement.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelMoments {
    pub log_z: f64,
    pub g: f64,
    pub dg: f64,
}

/// Output-channel statistics at `(ω, y, V)`:
/// `log ∫ P_out(y|z) N(z; ω, V) dz`, its first derivative in `ω` (which is
/// `g_out`) and the second (`∂_ω g_out = Var(z)/V² − 1/V`).
pub fn channel_moments(channel: &OutputChannel, omega: f64, y: f64, v: f64) -> Result<ChannelMoments> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(Error::param(format!("V = {v} must be positive")));
    }
    match channel {
        OutputChannel::Awgn { delta } => {
            let s = delta + v;
            Ok(ChannelMoments {
                log_z: -0.5 * (2.0 * PI * s).ln() - (y - omega) * (y - omega) / (2.0 * s),
                g: (y - omega) / s,
                dg: -1.0 / s,
            })
        }
        OutputChannel::Custom(ch) => {
            let rule = ch.rule();
            let scale = (2.0 * v).sqrt();
            let terms: Vec<f64> = rule
                .nodes()
                .iter()
                .zip(rule.log_weights())
                .map(|(t, lw)| lw + ch.log_pout(y, omega + scale * t))
                .collect();
            let lse = log_sum_exp(&terms);
            if !lse.is_finite() {
                return Err(Error::numeric(
                    format!("channel quadrature at ω={omega}, y={y}, V={v}"),
                    "normalization underflowed",
                ));
            }
            let mut mean = 0.0;
            for (t, l) in rule.nodes().iter().zip(&terms) {
                mean += (l - lse).exp() * scale * t;
            }
            let mut var = 0.0;
            for (t, l) in rule.nodes().iter().zip(&terms) {
                let dz = scale * t - mean;
                var += (l - lse).exp() * dz * dz;
            }
            Ok(ChannelMoments {
                log_z: lse - 0.5 * PI.ln(),
                g: mean / v,
                dg: var / (v * v) - 1.0 / v,
            })
        }
    }
}

/// `g_out(ω, y, V)` and `∂_ω g_out`.
pub fn gout(channel: &OutputChannel, omega: f64, y: f64, v: f64) -> Result<(f64, f64)> {
    let cm = channel_moments(channel, omega, y, v)?;
    Ok((cm.g, cm.dg))
}

/// Channel statistics in the `V → 0` limit, where the Gaussian collapses
/// onto `z = ω`.
pub(crate) fn channel_point_limit(channel: &OutputChannel, omega: f64, y: f64) -> ChannelMoments {
    match channel {
        OutputChannel::Awgn { delta } => ChannelMoments {
            log_z: channel_log_likelihood(channel, y, omega),
            g: (y - omega) / delta,
            dg: -1.0 / delta,
        },
        OutputChannel::Custom(_) => {
            let h = 1e-4 * (1.0 + omega.abs());
            let lp = |z| channel_log_likelihood(channel, y, z);
            let (l0, lm, lh) = (lp(omega), lp(omega - h), lp(omega + h));
            ChannelMoments {
                log_z: l0,
                g: (lh - lm) / (2.0 * h),
                dg: (lh - 2.0 * l0 + lm) / (h * h),
            }
        }
    }
}

/// Analytic partial derivatives of the unconstrained GAMP functional.
#[derive(Clone, Debug, PartialEq)]
pub struct GampGradient {
    pub r: Vec<f64>,
    /// With respect to `Σ_i²`.
    pub sigma2: Vec<f64>,
    pub omega: Vec<f64>,
    pub a: Vec<f64>,
    pub c: Vec<f64>,
}

struct GampTerms {
    value: f64,
    grad: GampGradient,
}

fn gamp_terms(
    instance: &Instance,
    channel: &OutputChannel,
    params: &VarParams,
    moments: &Moments,
    omega: &[f64],
) -> Result<GampTerms> {
    let (n, m) = (instance.n(), instance.m());
    params.validate(n)?;
    if moments.a.len() != n || moments.c.len() != n || omega.len() != m {
        return Err(Error::param("GAMP functional: inconsistent vector lengths"));
    }
    let v = instance.f_sq().mul_vec(&moments.c);
    if let Some(mu) = v.iter().position(|x| !(*x > 0.0)) {
        return Err(Error::numeric(
            format!("measurement {mu}"),
            format!("V = {} must be positive", v[mu]),
        ));
    }
    let p = instance.f().mul_vec(&moments.a);
    let prior = instance.prior();

    let mut value = 0.0;
    let mut d_omega = Vec::with_capacity(m);
    let mut w_a = Vec::with_capacity(m);
    let mut w_c = Vec::with_capacity(m);
    for mu in 0..m {
        let cm = channel_moments(channel, omega[mu], instance.y()[mu], v[mu])?;
        let u = omega[mu] - p[mu];
        value -= cm.log_z + u * u / (2.0 * v[mu]);
        d_omega.push(-cm.g - u / v[mu]);
        w_a.push(u / v[mu]);
        w_c.push(-0.5 * (cm.dg + cm.g * cm.g) + u * u / (2.0 * v[mu] * v[mu]));
    }
    let fa_sum = instance.ft().mul_vec(&w_a);
    let fc_sum = instance.f_sq().tmul_vec(&w_c);

    let mut grad = GampGradient {
        r: Vec::with_capacity(n),
        sigma2: Vec::with_capacity(n),
        omega: d_omega,
        a: Vec::with_capacity(n),
        c: Vec::with_capacity(n),
    };
    for i in 0..n {
        let (r, s2) = (params.r[i], params.sigma2[i].max(SIGMA2_FLOOR));
        let (a, c) = (moments.a[i], moments.c[i]);
        let post = prior.posterior(r, s2);
        let d = a - r;
        value -= (c + d * d) / (2.0 * s2) + post.log_z;
        let dp = post.mean - r;
        grad.r.push((a - post.mean) / s2);
        grad.sigma2.push(((c + d * d) - (dp * dp + post.var)) / (2.0 * s2 * s2));
        grad.a.push(-d / s2 + fa_sum[i]);
        grad.c.push(-0.5 / s2 + fc_sum[i]);
    }
    Ok(GampTerms { value, grad })
}

/// The unconstrained GAMP functional
/// `−Σ_μ log 𝒵_μ − Σ_i (c_i + (a_i−R_i)²)/2Σ_i² − Σ_μ (ω_μ − (Fa)_μ)²/2V_μ − Σ_i log Z(R_i, Σ_i²)`
/// with `V = F²c`. Here `a`, `c` and `ω` are free; its stationary points are
/// the GAMP fixed points, generally saddles.
pub fn gamp_generating_energy(
    instance: &Instance,
    channel: &OutputChannel,
    params: &VarParams,
    moments: &Moments,
    omega: &[f64],
) -> Result<f64> {
    Ok(gamp_terms(instance, channel, params, moments, omega)?.value)
}

/// Partial derivatives of [`gamp_generating_energy`] in each of its five
/// argument blocks.
pub fn gamp_generating_gradient(
    instance: &Instance,
    channel: &OutputChannel,
    params: &VarParams,
    moments: &Moments,
    omega: &[f64],
) -> Result<GampGradient> {
    Ok(gamp_terms(instance, channel, params, moments, omega)?.grad)
}

/// Solves `ω = p − V·g_out(ω, y, V)` for one measurement.
///
/// The residual `φ(ω) = ω − p + V g_out` is non-decreasing
/// (`φ' = Var(z)/V ≥ 0`), so a bracketed Newton iteration with bisection
/// fallback always converges once a sign change is found.
pub fn solve_omega(channel: &OutputChannel, p: f64, y: f64, v: f64, y_scale: f64, mu: usize) -> Result<f64> {
    if let OutputChannel::Awgn { delta } = channel {
        return Ok((p * (delta + v) - v * y) / delta);
    }
    let phi = |w: f64| -> Result<(f64, f64)> {
        let cm = channel_moments(channel, w, y, v)?;
        Ok((w - p + v * cm.g, 1.0 + v * cm.dg))
    };
    let fail = |msg: &str| Error::numeric(format!("ω* root for measurement {mu}"), msg.to_string());

    let mut half = 10.0 * (v * (v + y_scale)).sqrt();
    if !(half > 0.0) {
        half = 1.0;
    }
    let (mut lo, mut hi) = (p - half, p + half);
    let mut expansions = 0;
    while phi(lo)?.0 > 0.0 || phi(hi)?.0 < 0.0 {
        expansions += 1;
        if expansions > 60 {
            return Err(fail("no sign change in the bracket"));
        }
        half *= 2.0;
        lo = p - half;
        hi = p + half;
    }

    let mut w = p.clamp(lo, hi);
    for _ in 0..200 {
        let (f, df) = phi(w)?;
        if f.abs() <= 1e-14 * (1.0 + w.abs() + p.abs()) {
            return Ok(w);
        }
        if f < 0.0 {
            lo = w;
        } else {
            hi = w;
        }
        let newton = if df > 0.0 { w - f / df } else { f64::NAN };
        w = if newton.is_finite() && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if hi - lo <= 4.0 * f64::EPSILON * (1.0 + w.abs()) {
            return Ok(w);
        }
    }
    Err(fail("did not converge in 200 iterations"))
}

/// Bethe free energy for a general output channel, with the `*`
/// quantities taken at their fixed points given `(R, Σ²)`:
/// `Σ_i KL(Q‖P₀) + Σ_μ D_KL(𝓜‖P_out) + ½ Σ_μ (log 2πV_μ + 1 + V_μ ∂_ω g_out)`.
///
/// The channel KL is eliminated through
/// `−D_KL(𝓜‖P_out) = log 𝒵 + (log 2πV + 1 + V(∂_ω g_out + g_out²))/2`,
/// which leaves `KL − Σ_μ log 𝒵_μ − ½ Σ_μ V_μ g_μ²`; this form stays finite
/// when `V_μ = 0`.
pub fn gamp_variational_energy(
    instance: &Instance,
    channel: &OutputChannel,
    params: &VarParams,
) -> Result<EnergyReport> {
    check(instance, params)?;
    let st = Constrained::new(instance.prior(), params);
    let (a, c) = (st.a(), st.c());
    let p = instance.f().mul_vec(&a);
    let v = instance.f_sq().mul_vec(&c);
    let y = instance.y();
    let y_scale = norm_sq(y) / y.len() as f64;

    let mut value = st.kl();
    let mut g = Vec::with_capacity(p.len());
    let mut dg = Vec::with_capacity(p.len());
    for mu in 0..p.len() {
        let cm = if v[mu] > 0.0 {
            if let OutputChannel::Awgn { delta } = channel {
                // Closed form at the fixed point: y − ω* = (y − p)(Δ+V)/Δ.
                let s = delta + v[mu];
                let r = y[mu] - p[mu];
                let gap = r * s / delta;
                ChannelMoments {
                    log_z: -0.5 * (2.0 * PI * s).ln() - gap * gap / (2.0 * s),
                    g: r / delta,
                    dg: -1.0 / s,
                }
            } else {
                let w = solve_omega(channel, p[mu], y[mu], v[mu], y_scale, mu)?;
                channel_moments(channel, w, y[mu], v[mu])?
            }
        } else {
            channel_point_limit(channel, p[mu], y[mu])
        };
        value -= cm.log_z + 0.5 * v[mu] * cm.g * cm.g;
        g.push(cm.g);
        dg.push(cm.dg);
    }
    // Envelope in ω*: ∂E/∂a = −Fᵀg, ∂E/∂c = −½ (F²)ᵀ ∂_ω g_out.
    let e_a: Vec<f64> = instance.ft().mul_vec(&g).iter().map(|x| -x).collect();
    let half_dg: Vec<f64> = dg.iter().map(|x| -0.5 * x).collect();
    let e_c = instance.f_sq().tmul_vec(&half_dg);
    let (grad_r, grad_log_sigma2) = st.gradient(params, &e_a, &e_c);
    Ok(EnergyReport {
        value,
        grad_r,
        grad_log_sigma2,
        grad_log_delta: None,
    })
}
