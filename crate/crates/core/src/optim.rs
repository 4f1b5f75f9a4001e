//! Limited-memory BFGS with a strong-Wolfe line search.
//!
//! Kept in-repo with a fixed line-search schedule so minimizations are
//! reproducible across platforms.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::linalg::{dot, max_abs};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LbfgsConfig {
    pub history: usize,
    pub c1: f64,
    pub c2: f64,
    /// Stop when `‖∇f‖∞ / max(1, |f|)` falls to this level.
    pub grad_tol: f64,
    pub max_evals: usize,
    pub max_line_evals: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        LbfgsConfig {
            history: 10,
            c1: 1e-4,
            c2: 0.9,
            grad_tol: 1e-8,
            max_evals: 5000,
            max_line_evals: 30,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    /// Objective after every accepted step, starting with the initial point.
    pub trace: Vec<f64>,
}

pub fn scaled_grad_norm(value: f64, grad: &[f64]) -> f64 {
    max_abs(grad) / value.abs().max(1.0)
}

struct Counted<F> {
    f: F,
    evals: usize,
}

impl<F> Counted<F>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    /// Failed or non-finite evaluations read as `+∞` so the line search
    /// backs away from them.
    fn eval(&mut self, x: &[f64]) -> (f64, Vec<f64>) {
        self.evals += 1;
        match (self.f)(x) {
            Ok((v, g)) if v.is_finite() && g.iter().all(|x| x.is_finite()) => (v, g),
            _ => (f64::INFINITY, Vec::new()),
        }
    }
}

struct Trial {
    step: f64,
    value: f64,
    slope: f64,
    grad: Vec<f64>,
}

fn axpy(x: &[f64], step: f64, d: &[f64]) -> Vec<f64> {
    x.iter().zip(d).map(|(xi, di)| xi + step * di).collect()
}

/// Minimizer of the cubic interpolating `(a, fa, da)` and `(b, fb, db)`,
/// falling back to bisection when the cubic is degenerate.
fn cubic_min(a: f64, fa: f64, da: f64, b: f64, fb: f64, db: f64) -> f64 {
    let d1 = da + db - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - da * db;
    if disc.is_finite() && disc >= 0.0 {
        let d2 = (b - a).signum() * disc.sqrt();
        let t = b - (b - a) * (db + d2 - d1) / (db - da + 2.0 * d2);
        if t.is_finite() {
            return t;
        }
    }
    0.5 * (a + b)
}

/// Strong-Wolfe search along `d` from `x` (value `f0`, slope `g0 < 0`).
fn line_search<F>(
    obj: &mut Counted<F>,
    cfg: &LbfgsConfig,
    x: &[f64],
    d: &[f64],
    f0: f64,
    g0: f64,
    first_step: f64,
) -> Option<Trial>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let mut evals = 0;
    let probe = |obj: &mut Counted<F>, step: f64| -> Trial {
        let (value, grad) = obj.eval(&axpy(x, step, d));
        let slope = if grad.is_empty() { f64::NAN } else { dot(&grad, d) };
        Trial {
            step,
            value,
            slope,
            grad,
        }
    };

    let mut prev = Trial {
        step: 0.0,
        value: f0,
        slope: g0,
        grad: Vec::new(),
    };
    let mut step = first_step;
    let mut bracket: Option<(Trial, Trial)> = None;
    while evals < cfg.max_line_evals {
        let cur = probe(obj, step);
        evals += 1;
        if !cur.value.is_finite() {
            // Left the domain: shrink toward the last good point.
            step = prev.step + 0.1 * (step - prev.step);
            if step - prev.step <= f64::EPSILON * prev.step.max(1e-300) {
                return None;
            }
            continue;
        }
        if cur.value > f0 + cfg.c1 * step * g0 || (prev.step > 0.0 && cur.value >= prev.value) {
            bracket = Some((prev, cur));
            break;
        }
        if cur.slope.abs() <= -cfg.c2 * g0 {
            return Some(cur);
        }
        if cur.slope >= 0.0 {
            bracket = Some((cur, prev));
            break;
        }
        let next = (2.0 * step).min(step + 1e3 * (step - prev.step));
        prev = cur;
        step = next;
    }
    let (mut lo, mut hi) = bracket?;

    while evals < cfg.max_line_evals {
        let width = (hi.step - lo.step).abs();
        if width <= 1e-16 * hi.step.abs().max(lo.step.abs()) {
            break;
        }
        let mut t = if hi.slope.is_finite() {
            cubic_min(lo.step, lo.value, lo.slope, hi.step, hi.value, hi.slope)
        } else {
            0.5 * (lo.step + hi.step)
        };
        let (left, right) = (lo.step.min(hi.step), lo.step.max(hi.step));
        t = t.clamp(left + 0.1 * width, right - 0.1 * width);
        let cur = probe(obj, t);
        evals += 1;
        if !cur.value.is_finite() || cur.value > f0 + cfg.c1 * t * g0 || cur.value >= lo.value {
            hi = cur;
        } else {
            if cur.slope.abs() <= -cfg.c2 * g0 {
                return Some(cur);
            }
            if cur.slope * (hi.step - lo.step) >= 0.0 {
                hi = lo;
            }
            lo = cur;
        }
    }
    // Out of budget: accept a point with sufficient decrease if we have one.
    if lo.step > 0.0 && lo.value < f0 {
        Some(lo)
    } else {
        None
    }
}

/// Minimizes `f` from `x0`. `f` returns the value and gradient.
///
/// When a line search fails the memory is discarded and the search is
/// retried once along the steepest-descent direction; a second consecutive
/// failure ends the run with `converged = false` at the best point found.
pub fn lbfgs<F>(f: F, x0: Vec<f64>, cfg: &LbfgsConfig) -> Result<LbfgsResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let mut obj = Counted { f, evals: 0 };
    let (mut value, mut grad) = obj.eval(&x0);
    if !value.is_finite() {
        return Err(Error::numeric(
            "quasi-Newton start",
            "objective not finite at the initial point",
        ));
    }
    let mut x = x0;
    let mut mem: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(cfg.history);
    let mut trace = vec![value];
    let mut iterations = 0;
    let mut converged = false;
    let mut restarted = false;

    loop {
        if scaled_grad_norm(value, &grad) <= cfg.grad_tol {
            converged = true;
            break;
        }
        if obj.evals >= cfg.max_evals {
            break;
        }

        let mut d = two_loop(&grad, &mem);
        let mut slope = dot(&d, &grad);
        if !(slope < 0.0) {
            mem.clear();
            d = grad.iter().map(|g| -g).collect();
            slope = dot(&d, &grad);
        }
        let first = if mem.is_empty() {
            (1.0 / max_abs(&d)).min(1.0)
        } else {
            1.0
        };
        match line_search(&mut obj, cfg, &x, &d, value, slope, first) {
            Some(t) => {
                let x_new = axpy(&x, t.step, &d);
                let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
                let yv: Vec<f64> = t.grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
                let sy = dot(&s, &yv);
                if sy > 1e-14 * dot(&yv, &yv).sqrt() * dot(&s, &s).sqrt() {
                    if mem.len() == cfg.history {
                        mem.pop_front();
                    }
                    mem.push_back((s, yv, 1.0 / sy));
                }
                x = x_new;
                value = t.value;
                grad = t.grad;
                iterations += 1;
                trace.push(value);
                restarted = false;
            }
            None if !restarted && !mem.is_empty() => {
                log::debug!("line search failed at iteration {iterations}; restarting");
                mem.clear();
                restarted = true;
            }
            None => break,
        }
    }
    Ok(LbfgsResult {
        x,
        value,
        grad,
        iterations,
        evaluations: obj.evals,
        converged,
        trace,
    })
}

fn two_loop(grad: &[f64], mem: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q: Vec<f64> = grad.to_vec();
    let mut alphas = Vec::with_capacity(mem.len());
    for (s, y, rho) in mem.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = mem.back() {
        let gamma = dot(s, y) / dot(y, y);
        for qi in q.iter_mut() {
            *qi *= gamma;
        }
    }
    for ((s, y, rho), a) in mem.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q.iter().map(|v| -v).collect()
}
