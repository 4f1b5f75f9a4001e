//! Gauss-Hermite rules for Gaussian expectations of scalar functions.

use crate::error::{Error, Result};

/// Nodes and weights for `∫ e^{−t²} h(t) dt ≈ Σ_k w_k h(t_k)`.
#[derive(Clone, Debug)]
pub struct GaussHermite {
    nodes: Vec<f64>,
    weights: Vec<f64>,
    log_weights: Vec<f64>,
}

impl GaussHermite {
    /// Computes the `order`-point rule by Newton iteration on the
    /// orthonormal Hermite recurrence.
    pub fn new(order: usize) -> Result<Self> {
        if order == 0 {
            return Err(Error::param("Gauss-Hermite order must be positive"));
        }
        let n = order;
        let nf = n as f64;
        let pim4 = std::f64::consts::PI.powf(-0.25);
        let half = n.div_ceil(2);
        let mut x = vec![0.0; n];
        let mut w = vec![0.0; n];
        let mut z = 0.0_f64;
        for i in 0..half {
            z = match i {
                0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
                1 => z - 1.14 * nf.powf(0.426) / z,
                2 => 1.86 * z - 0.86 * x[0],
                3 => 1.91 * z - 0.91 * x[1],
                _ => 2.0 * z - x[i - 2],
            };
            let mut converged = false;
            for _ in 0..100 {
                let (p1, p2) = hermite_pair(n, z, pim4);
                let pp = (2.0 * nf).sqrt() * p2;
                let step = p1 / pp;
                z -= step;
                if step.abs() <= 1e-15 * z.abs().max(1.0) {
                    converged = true;
                    break;
                }
            }
            if !converged {
                return Err(Error::numeric(
                    format!("Gauss-Hermite node {i} of {n}"),
                    "Newton iteration did not converge",
                ));
            }
            let (_, p2) = hermite_pair(n, z, pim4);
            let pp = (2.0 * nf).sqrt() * p2;
            x[i] = z;
            x[n - 1 - i] = -z;
            w[i] = 2.0 / (pp * pp);
            w[n - 1 - i] = w[i];
        }
        // Ascending order.
        x.reverse();
        w.reverse();
        let log_weights = w.iter().map(|v: &f64| v.ln()).collect();
        Ok(GaussHermite {
            nodes: x,
            weights: w,
            log_weights,
        })
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    /// `E[h(z)]` for `z ~ N(mean, var)`.
    pub fn gaussian_expectation(&self, mean: f64, var: f64, h: impl Fn(f64) -> f64) -> f64 {
        let scale = (2.0 * var).sqrt();
        let s: f64 = self
            .nodes
            .iter()
            .zip(&self.weights)
            .map(|(t, w)| w * h(mean + scale * t))
            .sum();
        s / std::f64::consts::PI.sqrt()
    }
}

/// Returns `(p_n(z), p_{n−1}(z))` of the orthonormal Hermite family.
fn hermite_pair(n: usize, z: f64, pim4: f64) -> (f64, f64) {
    let mut p1 = pim4;
    let mut p2 = 0.0;
    for j in 1..=n {
        let jf = j as f64;
        let p3 = p2;
        p2 = p1;
        p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
    }
    (p1, p2)
}
