//! Exact posterior marginals for small problems by enumerating every
//! support pattern.
//!
//! On a fixed support `S` the posterior is Gaussian with precision
//! `A = I/g + F_Sᵀ F_S / Δ` and mean `A⁻¹ F_Sᵀ y / Δ`; its weight is the
//! Gaussian evidence times `ρ^|S| (1−ρ)^{N−|S|}`.

use crate::error::{Error, Result};
use crate::model::{Instance, Moments};

pub const MAX_ORACLE_N: usize = 14;

/// In-place Cholesky factor (lower triangle, row-major `k×k`). Returns
/// `false` if the matrix is not positive definite.
fn cholesky(a: &mut [f64], k: usize) -> bool {
    for j in 0..k {
        let mut d = a[j * k + j];
        for p in 0..j {
            d -= a[j * k + p] * a[j * k + p];
        }
        if !(d > 0.0) {
            return false;
        }
        let d = d.sqrt();
        a[j * k + j] = d;
        for i in j + 1..k {
            let mut s = a[i * k + j];
            for p in 0..j {
                s -= a[i * k + p] * a[j * k + p];
            }
            a[i * k + j] = s / d;
        }
    }
    true
}

struct SupportPosterior {
    log_weight: f64,
    mean: Vec<f64>,
    var: Vec<f64>,
}

fn support_posterior(
    support: &[usize],
    gram: &[f64],
    proj: &[f64],
    n: usize,
    slab_var: f64,
    log_prior: f64,
) -> Result<SupportPosterior> {
    let k = support.len();
    let mut a = vec![0.0; k * k];
    for (p, &i) in support.iter().enumerate() {
        for (q, &j) in support.iter().enumerate() {
            a[p * k + q] = gram[i * n + j];
        }
        a[p * k + p] += 1.0 / slab_var;
    }
    if !cholesky(&mut a, k) {
        return Err(Error::numeric(
            format!("support {support:?}"),
            "posterior precision is not positive definite",
        ));
    }
    // Forward substitution z = L⁻¹ b, then back substitution μ = L⁻ᵀ z.
    let mut z: Vec<f64> = support.iter().map(|&i| proj[i]).collect();
    for i in 0..k {
        for p in 0..i {
            z[i] -= a[i * k + p] * z[p];
        }
        z[i] /= a[i * k + i];
    }
    let quad: f64 = z.iter().map(|v| v * v).sum();
    let mut mean = z;
    for i in (0..k).rev() {
        for p in i + 1..k {
            mean[i] -= a[p * k + i] * mean[p];
        }
        mean[i] /= a[i * k + i];
    }
    // diag(A⁻¹)_i = Σ_r (L⁻¹)_{ri}²; build L⁻¹ column by column.
    let mut var = vec![0.0; k];
    for col in 0..k {
        let mut e = vec![0.0; k];
        e[col] = 1.0;
        for i in col..k {
            for p in col..i {
                e[i] -= a[i * k + p] * e[p];
            }
            e[i] /= a[i * k + i];
        }
        var[col] = e[col..].iter().map(|v| v * v).sum();
    }
    let log_det: f64 = (0..k).map(|i| 2.0 * a[i * k + i].ln()).sum();
    Ok(SupportPosterior {
        log_weight: log_prior - 0.5 * k as f64 * slab_var.ln() - 0.5 * log_det + 0.5 * quad,
        mean,
        var,
    })
}

/// Exact posterior means and variances of every coefficient, using the
/// instance's `Δ₀` as the noise variance.
pub fn exact_posterior_oracle(instance: &Instance) -> Result<Moments> {
    let n = instance.n();
    if n > MAX_ORACLE_N {
        return Err(Error::param(format!(
            "oracle enumerates 2^N supports; N = {n} exceeds {MAX_ORACLE_N}"
        )));
    }
    let prior = instance.prior();
    let delta = instance.delta0();
    let f = instance.f();
    let m = instance.m();
    let mut gram = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            gram[i * n + j] = (0..m).map(|mu| f.get(mu, i) * f.get(mu, j)).sum::<f64>() / delta;
        }
    }
    let proj: Vec<f64> = instance.ft().mul_vec(instance.y()).iter().map(|v| v / delta).collect();
    let (ln_on, ln_off) = (prior.rho.ln(), (1.0 - prior.rho).ln());

    let mut posts = Vec::new();
    let mut supports = Vec::new();
    for mask in 0u32..(1u32 << n) {
        let support: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 1).collect();
        let k = support.len();
        // Skip empty factors so that 0·ln 0 never turns into NaN.
        let term = |count: usize, ln: f64| if count == 0 { 0.0 } else { count as f64 * ln };
        let log_prior = term(k, ln_on) + term(n - k, ln_off);
        if log_prior == f64::NEG_INFINITY {
            continue;
        }
        posts.push(support_posterior(
            &support,
            &gram,
            &proj,
            n,
            prior.gaussian_var,
            log_prior,
        )?);
        supports.push(support);
    }
    let max = posts.iter().map(|p| p.log_weight).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = posts.iter().map(|p| (p.log_weight - max).exp()).collect();
    let total: f64 = weights.iter().sum();

    let mut a = vec![0.0; n];
    for ((p, s), w) in posts.iter().zip(&supports).zip(&weights) {
        for (q, &i) in s.iter().enumerate() {
            a[i] += w / total * p.mean[q];
        }
    }
    // Second pass about the mixture mean avoids cancellation in E[x²] − a².
    let mut c = vec![0.0; n];
    for ((p, s), w) in posts.iter().zip(&supports).zip(&weights) {
        let w = w / total;
        let mut on = vec![None; n];
        for (q, &i) in s.iter().enumerate() {
            on[i] = Some(q);
        }
        for i in 0..n {
            c[i] += w * match on[i] {
                Some(q) => (p.mean[q] - a[i]).powi(2) + p.var[q],
                None => a[i] * a[i],
            };
        }
    }
    Ok(Moments { a, c })
}
