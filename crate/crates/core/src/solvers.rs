//! Reconstruction algorithms: mean-field iteration (sequential, with noise
//! learning, and in parallel as iterative thresholding), AMP, its damped
//! and generic-channel variants, and direct quasi-Newton minimization of
//! the mean-field or Bethe free energy.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::denoiser::{threshold_eta, ScalarDenoiser};
use crate::error::{Error, Result};
use crate::free_energy::{
    bethe_energy, channel_moments, channel_point_limit, gamp_variational_energy, learn_delta, mf_energy, DELTA_FLOOR,
};
use crate::linalg::{dot, max_abs_diff, norm_sq};
use crate::model::{mse, Instance, Moments, OutputChannel, VarParams};
use crate::optim::{lbfgs, LbfgsConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    MfSeq,
    MfLearn,
    Ist,
    Amp,
    AmpDamped,
    Gamp,
    #[serde(rename = "mf-min")]
    MinimizeMf,
    #[serde(rename = "mf-learn-min")]
    MinimizeMfLearn,
    #[serde(rename = "bethe-min")]
    MinimizeBethe,
}

impl Algorithm {
    pub const ALL: [Algorithm; 9] = [
        Algorithm::MfSeq,
        Algorithm::MfLearn,
        Algorithm::Ist,
        Algorithm::Amp,
        Algorithm::AmpDamped,
        Algorithm::Gamp,
        Algorithm::MinimizeMf,
        Algorithm::MinimizeMfLearn,
        Algorithm::MinimizeBethe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::MfSeq => "mf-seq",
            Algorithm::MfLearn => "mf-learn",
            Algorithm::Ist => "ist",
            Algorithm::Amp => "amp",
            Algorithm::AmpDamped => "amp-damped",
            Algorithm::Gamp => "gamp",
            Algorithm::MinimizeMf => "mf-min",
            Algorithm::MinimizeMfLearn => "mf-learn-min",
            Algorithm::MinimizeBethe => "bethe-min",
        }
    }

    /// Whether the noise variance is a variable rather than fixed.
    pub fn learns_delta(self) -> bool {
        matches!(self, Algorithm::MfLearn | Algorithm::MinimizeMfLearn)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            let names: Vec<_> = Algorithm::ALL.iter().map(|a| a.name()).collect();
            Error::param(format!(
                "unknown algorithm '{s}' (expected one of {})",
                names.join(", ")
            ))
        })
    }
}

/// Starting estimate of the signal.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeedInit {
    #[default]
    Zeros,
    PriorMean,
    /// Entries drawn from `N(0, ρ·var)` with the given seed.
    Random(u64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub algo: Algorithm,
    pub max_iter: usize,
    /// Convergence threshold on `max_i |a_i^{t+1} − a_i^t|`.
    pub tol: f64,
    pub damping: f64,
    /// Re-estimate `Δ` every AMP iteration (mean-field variants always
    /// learn when their algorithm says so).
    pub learn_delta: bool,
    /// Fixed or starting `Δ`; `None` means `Δ₀` for fixed-noise solvers and
    /// `‖y‖²/M` for learning ones.
    pub delta_init: Option<f64>,
    pub seed_init: SeedInit,
}

impl SolverConfig {
    pub fn new(algo: Algorithm) -> Self {
        SolverConfig {
            algo,
            max_iter: 1000,
            tol: 1e-8,
            damping: if algo == Algorithm::AmpDamped { 0.5 } else { 0.0 },
            learn_delta: false,
            delta_init: None,
            seed_init: SeedInit::Zeros,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.damping) {
            return Err(Error::param(format!("damping = {} outside [0, 1)", self.damping)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::param(format!("tol = {} must be positive", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(Error::param("max_iter must be at least 1"));
        }
        if let Some(d) = self.delta_init {
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::param(format!("delta_init = {d} must be positive")));
            }
        }
        Ok(())
    }

    fn fixed_delta(&self, instance: &Instance) -> f64 {
        self.delta_init.unwrap_or(instance.delta0())
    }

    fn learned_delta_start(&self, instance: &Instance) -> f64 {
        self.delta_init
            .unwrap_or_else(|| norm_sq(instance.y()) / instance.m() as f64)
            .max(DELTA_FLOOR)
    }

    fn initial_signal(&self, instance: &Instance) -> Vec<f64> {
        let n = instance.n();
        match self.seed_init {
            SeedInit::Zeros => vec![0.0; n],
            SeedInit::PriorMean => vec![instance.prior().rho * instance.prior().gaussian_mean; n],
            SeedInit::Random(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let sd = instance.prior().second_moment().sqrt();
                (0..n).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub algo: Algorithm,
    pub a_final: Vec<f64>,
    pub c_final: Vec<f64>,
    pub params_final: VarParams,
    pub iterations: usize,
    pub converged: bool,
    /// Set when the divergence guard `‖a‖ > 10³√N` fired.
    pub diverged: bool,
    #[serde(default)]
    pub energy_trace: Vec<f64>,
    /// Noise variance after each iteration, for the algorithms that learn it.
    #[serde(default)]
    pub delta_trace: Vec<f64>,
    pub mse_final: Option<f64>,
    /// Iterations whose energy rose after every damping backoff.
    pub flagged_steps: Vec<usize>,
}

impl SolveReport {
    fn new(algo: Algorithm, instance: &Instance, moments: Moments, params: VarParams) -> Result<Self> {
        let mse_final = instance.x_true().map(|x| mse(&moments.a, x)).transpose()?;
        Ok(SolveReport {
            algo,
            a_final: moments.a,
            c_final: moments.c,
            params_final: params,
            iterations: 0,
            converged: false,
            diverged: false,
            energy_trace: Vec::new(),
            delta_trace: Vec::new(),
            mse_final,
            flagged_steps: Vec::new(),
        })
    }

    /// Pretty JSON; the traces are dropped unless `traces` is set.
    pub fn to_json(&self, traces: bool) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if !traces {
            if let Some(obj) = v.as_object_mut() {
                obj.remove("energy_trace");
                obj.remove("delta_trace");
            }
        }
        Ok(serde_json::to_string_pretty(&v)? + "\n")
    }
}

fn diverging(a: &[f64]) -> bool {
    norm_sq(a).sqrt() > 1e3 * (a.len() as f64).sqrt()
}

fn finite_energy(value: f64, iteration: usize) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::numeric(
            format!("iteration {iteration}"),
            "free energy is not finite",
        ))
    }
}

fn check_finite(a: &[f64], iteration: usize) -> Result<()> {
    if a.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::numeric(
            format!("iteration {iteration}"),
            "estimate is not finite",
        ))
    }
}

/// Runs the configured algorithm. `Gamp` uses the AWGN channel at the
/// configured noise variance.
pub fn solve(instance: &Instance, config: &SolverConfig) -> Result<SolveReport> {
    config.validate()?;
    match config.algo {
        Algorithm::MfSeq => solve_mf_sequential(instance, config),
        Algorithm::MfLearn => solve_mf_learn(instance, config),
        Algorithm::Ist => solve_ist(instance, config),
        Algorithm::Amp => solve_amp(instance, config),
        Algorithm::AmpDamped => solve_amp_damped(instance, config),
        Algorithm::Gamp => {
            let channel = OutputChannel::awgn(config.fixed_delta(instance))?;
            solve_gamp(instance, &channel, config)
        }
        Algorithm::MinimizeMf | Algorithm::MinimizeMfLearn | Algorithm::MinimizeBethe => {
            minimize_energy(instance, config)
        }
    }
}

/// Mean-field variances `Σ_i² = Δ / Σ_μ F²_{μi}`; an empty column keeps the
/// prior.
fn mf_sigma2(instance: &Instance, delta: f64) -> Vec<f64> {
    instance
        .col_sq()
        .iter()
        .map(|&d| if d > 0.0 { delta / d } else { f64::MAX })
        .collect()
}

struct SeqState {
    a: Vec<f64>,
    c: Vec<f64>,
    r: Vec<f64>,
    resid: Vec<f64>,
}

impl SeqState {
    fn new(instance: &Instance, a: Vec<f64>) -> Self {
        let n = a.len();
        let resid = instance.residual(&a);
        SeqState {
            a,
            c: vec![0.0; n],
            r: vec![0.0; n],
            resid,
        }
    }

    /// One pass `i = 1…N` of exact coordinate updates; returns the largest
    /// change in `a`.
    fn sweep(&mut self, instance: &Instance, sigma2: &[f64]) -> f64 {
        let prior = instance.prior();
        let ft = instance.ft();
        let d = instance.col_sq();
        let mut change: f64 = 0.0;
        for i in 0..self.a.len() {
            let col = ft.row(i);
            self.r[i] = if d[i] > 0.0 {
                self.a[i] + dot(col, &self.resid) / d[i]
            } else {
                0.0
            };
            let post = prior.posterior(self.r[i], sigma2[i]);
            let step = post.mean - self.a[i];
            if step != 0.0 {
                for (res, f) in self.resid.iter_mut().zip(col) {
                    *res -= f * step;
                }
            }
            change = change.max(step.abs());
            self.a[i] = post.mean;
            self.c[i] = post.var;
        }
        change
    }
}

/// Sequential mean-field iteration at fixed `Δ`.
pub fn solve_mf_sequential(instance: &Instance, config: &SolverConfig) -> Result<SolveReport> {
    config.validate()?;
    let delta = config.fixed_delta(instance);
    let sigma2 = mf_sigma2(instance, delta);
    let mut st = SeqState::new(instance, config.initial_signal(instance));
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for t in 1..=config.max_iter {
        let change = st.sweep(instance, &sigma2);
        iterations = t;
        check_finite(&st.a, t)?;
        let params = VarParams {
            r: st.r.clone(),
            sigma2: sigma2.clone(),
            delta,
        };
        trace.push(finite_energy(mf_energy(instance, &params)?.value, t)?);
        if change < config.tol {
            converged = true;
            break;
        }
    }
    let params = VarParams { r: st.r, sigma2, delta };
    let mut rep = SolveReport::new(config.algo, instance, Moments { a: st.a, c: st.c }, params)?;
    rep.iterations = iterations;
    rep.converged = converged;
    rep.energy_trace = trace;
    Ok(rep)
}

/// Sequential mean field alternated with the stationary-`Δ` update.
pub fn solve_mf_learn(instance: &Instance, config: &SolverConfig) -> Result<SolveReport> {
    config.validate()?;
    let mut delta = config.learned_delta_start(instance);
    let mut st = SeqState::new(instance, config.initial_signal(instance));
    let mut sigma2 = mf_sigma2(instance, delta);
    let mut trace = Vec::new();
    let mut delta_trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for t in 1..=config.max_iter {
        sigma2 = mf_sigma2(instance, delta);
        let change = st.sweep(instance, &sigma2);
        iterations = t;
        check_finite(&st.a, t)?;
        let new_delta = learn_delta(
            instance,
            &Moments {
                a: st.a.clone(),
                c: st.c.clone(),
            },
        );
        let delta_change = (new_delta - delta).abs() / delta;
        delta = new_delta;
        delta_trace.push(delta);
        let params = VarParams {
            r: st.r.clone(),
            sigma2: sigma2.clone(),
            delta,
        };
        trace.push(finite_energy(mf_energy(instance, &params)?.value, t)?);
        if change < config.tol && delta_change < config.tol {
            converged = true;
            break;
        }
    }
    let params = VarParams { r: st.r, sigma2, delta };
    let mut rep = SolveReport::new(config.algo, instance, Moments { a: st.a, c: st.c }, params)?;
    rep.iterations = iterations;
    rep.converged = converged;
    rep.energy_trace = trace;
    rep.delta_trace = delta_trace;
    Ok(rep)
}

/// One simultaneous mean-field update of every coefficient:
/// `R = a + Fᵀ(y − Fa)/d`, `Σ² = Δ/d`, then the denoiser. Returns the new
/// moments and the fields `R`.
pub fn mf_parallel_step(instance: &Instance, a: &[f64], delta: f64) -> Result<(Moments, Vec<f64>)> {
    let resid = instance.residual(a);
    let corr = instance.ft().mul_vec(&resid);
    let sigma2 = mf_sigma2(instance, delta);
    let prior = instance.prior();
    let mut out = Moments {
        a: Vec::with_capacity(a.len()),
        c: Vec::with_capacity(a.len()),
    };
    let mut r = Vec::with_capacity(a.len());
    for (i, &d) in instance.col_sq().iter().enumerate() {
        let ri = if d > 0.0 { a[i] + corr[i] / d } else { 0.0 };
        let post = prior.posterior(ri, sigma2[i]);
        out.a.push(post.mean);
        out.c.push(post.var);
        r.push(ri);
    }
    Ok((out, r))
}

/// One iterative-thresholding step `a ← η(Fᵀ(y − Fa) + a)`.
///
/// The threshold is applied per coordinate as `√d_i η_{Δ/d_i}(u/√d_i)`,
/// which is the prior-consistent denoiser when column `i` has squared norm
/// `d_i` and reduces to `η_Δ` once the columns are normalized.
pub fn ist_step(instance: &Instance, a: &[f64], delta: f64) -> Result<Vec<f64>> {
    ist_update(instance, a, delta, instance.col_sq())
}

// `col_sq` holds the squared column norms the threshold is rescaled by; for
// a normalized copy of an instance these are the original norms.
fn ist_update(instance: &Instance, a: &[f64], delta: f64, col_sq: &[f64]) -> Result<Vec<f64>> {
    let resid = instance.residual(a);
    let corr = instance.ft().mul_vec(&resid);
    let prior = instance.prior();
    col_sq
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            let u = corr[i] + a[i];
            if d == 1.0 {
                threshold_eta(prior, u, delta)
            } else {
                let s = d.sqrt();
                Ok(s * threshold_eta(prior, u / s, delta / d)?)
            }
        })
        .collect()
}

/// Iterative thresholding on the column-normalized problem; the estimate is
/// mapped back to the original scale.
pub fn solve_ist(instance: &Instance, config: &SolverConfig) -> Result<SolveReport> {
    config.validate()?;
    let delta = config.fixed_delta(instance);
    let normalized = instance.with_normalized_columns()?;
    let scale: Vec<f64> = instance.col_sq().iter().map(|d| d.sqrt()).collect();
    let mut a: Vec<f64> = config
        .initial_signal(instance)
        .iter()
        .zip(&scale)
        .map(|(x, s)| x * s)
        .collect();
    let sigma2 = mf_sigma2(instance, delta);
    let mut r = vec![0.0; a.len()];
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for t in 1..=config.max_iter {
        let resid = normalized.residual(&a);
        let corr = normalized.ft().mul_vec(&resid);
        let next = ist_update(&normalized, &a, delta, instance.col_sq())?;
        for i in 0..a.len() {
            r[i] = (corr[i] + a[i]) / scale[i];
        }
        iterations = t;
        check_finite(&next, t)?;
        let change = max_abs_diff(&next, &a);
        a = next;
        let params = VarParams {
            r: r.clone(),
            sigma2: sigma2.clone(),
            delta,
        };
        trace.push(finite_energy(mf_energy(instance, &params)?.value, t)?);
        if diverging(&a) {
            break;
        }
        if change < config.tol {
            converged = true;
            break;
        }
    }
    let params = VarParams { r, sigma2, delta };
    let prior = instance.prior();
    let (a_out, c_out) = params
        .r
        .iter()
        .zip(&params.sigma2)
        .map(|(&ri, &s2)| {
            let p = prior.posterior(ri, s2);
            (p.mean, p.var)
        })
        .unzip();
    let diverged = diverging(&a);
    let mut rep = SolveReport::new(config.algo, instance, Moments { a: a_out, c: c_out }, params)?;
    rep.iterations = iterations;
    rep.converged = converged;
    rep.diverged = diverged;
    rep.energy_trace = trace;
    Ok(rep)
}

/// AMP iteration state: estimate, variances, and the per-measurement
/// `(V, ω)` with the matching fields `(R, Σ²)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AmpState {
    pub a: Vec<f64>,
    pub c: Vec<f64>,
    pub v: Vec<f64>,
    pub omega: Vec<f64>,
    pub r: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub delta: f64,
}

impl AmpState {
    /// `a = a⁰`, `c = ρ·var`, `ω = y`, `V = F²c`.
    pub fn initial(instance: &Instance, a: Vec<f64>, delta: f64) -> Self {
        let n = a.len();
        let c = vec![instance.prior().second_moment(); n];
        let v = instance.f_sq().mul_vec(&c);
        AmpState {
            a,
            c,
            v,
            omega: instance.y().to_vec(),
            r: vec![0.0; n],
            sigma2: vec![1.0; n],
            delta,
        }
    }

    /// A state already at the AMP fixed point implied by `moments`:
    /// `ω` solves the Onsager relation `y − ω = (y − Fa)(Δ + V)/Δ`.
    pub fn from_moments(instance: &Instance, moments: &Moments, delta: f64) -> Self {
        let v = instance.f_sq().mul_vec(&moments.c);
        let resid = instance.residual(&moments.a);
        let omega = instance
            .y()
            .iter()
            .zip(&resid)
            .zip(&v)
            .map(|((y, r), vm)| y - r * (delta + vm) / delta)
            .collect();
        let n = moments.a.len();
        AmpState {
            a: moments.a.clone(),
            c: moments.c.clone(),
            v,
            omega,
            r: vec![0.0; n],
            sigma2: vec![1.0; n],
            delta,
        }
    }

    fn params(&self) -> VarParams {
        VarParams {
            r: self.r.clone(),
            sigma2: self.sigma2.clone(),
            delta: self.delta,
        }
    }
}

/// One AMP step from `s`, with `(V, ω)` mixed as
/// `(1−β)·new + β·old`; when `damp_fields` is set `(R, Σ²)` are mixed the
/// same way (skipped on the first step, where no fields exist yet).
fn amp_step(instance: &Instance, s: &AmpState, beta: f64, damp_fields: bool, t: usize) -> Result<AmpState> {
    let delta = s.delta;
    let fa = instance.f().mul_vec(&s.a);
    let v_new = instance.f_sq().mul_vec(&s.c);
    let m = fa.len();
    let mut v = Vec::with_capacity(m);
    let mut omega = Vec::with_capacity(m);
    for mu in 0..m {
        let onsager = (instance.y()[mu] - s.omega[mu]) * v_new[mu] / (delta + s.v[mu]);
        let w = fa[mu] - onsager;
        v.push((1.0 - beta) * v_new[mu] + beta * s.v[mu]);
        omega.push((1.0 - beta) * w + beta * s.omega[mu]);
    }
    if let Some(mu) = v.iter().position(|vm| !(delta + vm > 0.0)) {
        return Err(Error::numeric(
            format!("iteration {t}, measurement {mu}"),
            format!("V + Δ = {} is not positive", v[mu] + delta),
        ));
    }
    let inv: Vec<f64> = v.iter().map(|vm| 1.0 / (delta + vm)).collect();
    let weighted: Vec<f64> = (0..m).map(|mu| (instance.y()[mu] - omega[mu]) * inv[mu]).collect();
    let prec = instance.f_sq().tmul_vec(&inv);
    let corr = instance.ft().mul_vec(&weighted);

    let prior = instance.prior();
    let n = s.a.len();
    let mut out = AmpState {
        a: Vec::with_capacity(n),
        c: Vec::with_capacity(n),
        v,
        omega,
        r: Vec::with_capacity(n),
        sigma2: Vec::with_capacity(n),
        delta,
    };
    let mix = if damp_fields && t > 1 { beta } else { 0.0 };
    for i in 0..n {
        let s2_new = 1.0 / prec[i];
        let r_new = s.a[i] + s2_new * corr[i];
        let s2 = (1.0 - mix) * s2_new + mix * s.sigma2[i];
        let r = (1.0 - mix) * r_new + mix * s.r[i];
        let post = prior.posterior(r, s2);
        out.a.push(post.mean);
        out.c.push(post.var);
        out.r.push(r);
        out.sigma2.push(s2);
    }
    Ok(out)
}

fn amp_loop(instance: &Instance, config: &SolverConfig, mut s: AmpState) -> Result<SolveReport> {
    let mut trace = Vec::new();
    let mut delta_trace = Vec::new();
    let mut converged = false;
    let mut diverged = false;
    let mut iterations = 0;
    for t in 1..=config.max_iter {
        let next = amp_step(instance, &s, config.damping, false, t)?;
        iterations = t;
        check_finite(&next.a, t)?;
        let change = max_abs_diff(&next.a, &s.a);
        s = next;
        trace.push(finite_energy(bethe_energy(instance, &s.params())?.value, t)?);
        if config.learn_delta {
            s.delta = learn_delta(
                instance,
                &Moments {
                    a: s.a.clone(),
                    c: s.c.clone(),
                },
            );
            delta_trace.push(s.delta);
        }
        if diverging(&s.a) {
            diverged = true;
            break;
        }
        if change < config.tol {
            converged = true;
            break;
        }
    }
    let params = s.params();
    let mut rep = SolveReport::new(config.algo, instance, Moments { a: s.a, c: s.c }, params)?;
    rep.iterations = iterations;
    rep.converged = converged;
    rep.diverged = diverged;
    rep.energy_trace = trace;
    rep.delta_trace = delta_trace;
    Ok(rep)
}

/// AMP from the configured starting point.
pub fn solve_amp(instance: &Instance, config: &SolverConfig) -> Result<SolveReport> {
    config.validate()?;
    let delta = if config.learn_delta {
        config.learned_delta_start(instance)
    } else {
        config.fixed_delta(instance)
    };
    let s = AmpState::initial(instance, config.initial_signal(instance), delta);
    amp_loop(instance, config, s)
}

/// AMP continued from an arbitrary state.
pub fn solve_amp_from(instance: &Instance, config: &SolverConfig, start: AmpState) -> Result<SolveReport> {
    config.validate()?;
    amp_loop(instance, config, start)
}

const MAX_BACKOFFS: usize = 8;

/// AMP with damping adapted so the Bethe free energy does not increase.
///
/// A step that raises the energy is recomputed with `β ← 1 − (1−β)/2`, up
/// to eight times; accepted steps let `β` relax halfway back toward the
/// configured damping. The fields `(R, Σ²)` are damped together with
/// `(V, ω)` so that `β → 1` really shrinks the step.
pub fn solve_amp_damped(instance: &Instance, config: &SolverConfig) -> Result<SolveReport> {
    config.validate()?;
    let delta = config.fixed_delta(instance);
    let mut s = AmpState::initial(instance, config.initial_signal(instance), delta);
    let mut energy = f64::INFINITY;
    let mut beta = config.damping;
    let mut trace = Vec::new();
    let mut flagged = Vec::new();
    let mut converged = false;
    let mut diverged = false;
    let mut iterations = 0;
    for t in 1..=config.max_iter {
        let mut trial_beta = beta;
        let mut backoffs = 0;
        let (next, next_energy) = loop {
            let cand = amp_step(instance, &s, trial_beta, true, t)?;
            let e = bethe_energy(instance, &cand.params())?.value;
            if e <= energy || !energy.is_finite() {
                break (cand, e);
            }
            if backoffs == MAX_BACKOFFS {
                // Heavily damped steps barely move, so they would stall the
                // iteration and fake convergence; take the nominal step.
                log::warn!("iteration {t}: energy rose after {MAX_BACKOFFS} backoffs; accepting nominal step");
                flagged.push(t);
                trial_beta = config.damping;
                let cand = amp_step(instance, &s, trial_beta, true, t)?;
                let e = bethe_energy(instance, &cand.params())?.value;
                break (cand, e);
            }
            backoffs += 1;
            trial_beta = 1.0 - (1.0 - trial_beta) / 2.0;
        };
        let step_beta = trial_beta;
        beta = if backoffs > 0 {
            trial_beta
        } else {
            config.damping + 0.5 * (beta - config.damping)
        };
        iterations = t;
        check_finite(&next.a, t)?;
        let change = max_abs_diff(&next.a, &s.a);
        s = next;
        energy = finite_energy(next_energy, t)?;
        trace.push(energy);
        if diverging(&s.a) {
            diverged = true;
            break;
        }
        // Damping shrinks every step by 1 − β; judge convergence on the
        // undamped step size.
        if change < config.tol * (1.0 - step_beta) && flagged.last() != Some(&t) {
            converged = true;
            break;
        }
    }
    let params = s.params();
    let mut rep = SolveReport::new(config.algo, instance, Moments { a: s.a, c: s.c }, params)?;
    rep.iterations = iterations;
    rep.converged = converged;
    rep.diverged = diverged;
    rep.energy_trace = trace;
    rep.flagged_steps = flagged;
    Ok(rep)
}

/// GAMP: the AMP recursion with the Gaussian-channel terms replaced by
/// `g_out` and `∂_ω g_out`.
///
/// The Onsager correction uses `g_out(ω^t, y, V^t)` from the previous step
/// (zero on the first step), which is what reproduces AMP exactly for
/// additive Gaussian noise.
pub fn solve_gamp(instance: &Instance, channel: &OutputChannel, config: &SolverConfig) -> Result<SolveReport> {
    config.validate()?;
    let n = instance.n();
    let m = instance.m();
    let y = instance.y();
    let prior = instance.prior();
    let beta = config.damping;
    let delta = config.fixed_delta(instance);

    let mut a = config.initial_signal(instance);
    let mut c = vec![prior.second_moment(); n];
    let mut v = instance.f_sq().mul_vec(&c);
    let mut omega = y.to_vec();
    let mut g = vec![0.0; m];
    let mut r = vec![0.0; n];
    let mut sigma2 = vec![1.0; n];
    let mut trace = Vec::new();
    let mut converged = false;
    let mut diverged = false;
    let mut iterations = 0;
    for t in 1..=config.max_iter {
        let fa = instance.f().mul_vec(&a);
        let v_new = instance.f_sq().mul_vec(&c);
        for mu in 0..m {
            let w = fa[mu] - v_new[mu] * g[mu];
            omega[mu] = (1.0 - beta) * w + beta * omega[mu];
            v[mu] = (1.0 - beta) * v_new[mu] + beta * v[mu];
        }
        let mut neg_dg = Vec::with_capacity(m);
        for mu in 0..m {
            let cm = if v[mu] > 0.0 {
                channel_moments(channel, omega[mu], y[mu], v[mu])
                    .map_err(|e| Error::numeric(format!("iteration {t}, measurement {mu}"), e.to_string()))?
            } else {
                channel_point_limit(channel, omega[mu], y[mu])
            };
            g[mu] = cm.g;
            neg_dg.push(-cm.dg);
        }
        let prec = instance.f_sq().tmul_vec(&neg_dg);
        let corr = instance.ft().mul_vec(&g);
        let mut change: f64 = 0.0;
        for i in 0..n {
            if !(prec[i] > 0.0) {
                return Err(Error::numeric(
                    format!("iteration {t}, coefficient {i}"),
                    format!("channel precision {} is not positive", prec[i]),
                ));
            }
            sigma2[i] = 1.0 / prec[i];
            r[i] = a[i] + sigma2[i] * corr[i];
            let post = prior.posterior(r[i], sigma2[i]);
            change = change.max((post.mean - a[i]).abs());
            a[i] = post.mean;
            c[i] = post.var;
        }
        iterations = t;
        check_finite(&a, t)?;
        let params = VarParams {
            r: r.clone(),
            sigma2: sigma2.clone(),
            delta,
        };
        trace.push(finite_energy(
            gamp_variational_energy(instance, channel, &params)?.value,
            t,
        )?);
        if diverging(&a) {
            diverged = true;
            break;
        }
        if change < config.tol {
            converged = true;
            break;
        }
    }
    let params = VarParams { r, sigma2, delta };
    let mut rep = SolveReport::new(config.algo, instance, Moments { a, c }, params)?;
    rep.iterations = iterations;
    rep.converged = converged;
    rep.diverged = diverged;
    rep.energy_trace = trace;
    Ok(rep)
}

/// Quasi-Newton minimization of the mean-field or Bethe free energy over
/// `(R, log Σ²)`, plus `log Δ` for the noise-learning variant.
///
/// With `Δ` fixed, the energy is first minimized at `Δ = ‖y‖²/M` and `Δ` is
/// then lowered a decade at a time to its target, each stage warm-started
/// from the previous one. Starting directly at a tiny `Δ` leaves the
/// minimizer in a valley whose stiffness ratio grows like `1/Δ`. The
/// intermediate stages share half of the `5·max_iter` evaluation budget.
pub fn minimize_energy(instance: &Instance, config: &SolverConfig) -> Result<SolveReport> {
    config.validate()?;
    let n = instance.n();
    let (bethe, learn) = match config.algo {
        Algorithm::MinimizeMf => (false, false),
        Algorithm::MinimizeMfLearn => (false, true),
        Algorithm::MinimizeBethe => (true, false),
        other => {
            return Err(Error::param(format!("{other} is not a free-energy minimizer")));
        }
    };
    let unpack = |z: &[f64], delta: f64| VarParams {
        r: z[..n].to_vec(),
        sigma2: z[n..2 * n].iter().map(|l| l.exp()).collect(),
        delta: if learn { z[2 * n].exp().max(DELTA_FLOOR) } else { delta },
    };
    let objective = |delta: f64| {
        move |z: &[f64]| -> Result<(f64, Vec<f64>)> {
            let p = unpack(z, delta);
            let rep = if bethe {
                bethe_energy(instance, &p)?
            } else {
                mf_energy(instance, &p)?
            };
            let mut grad = rep.grad_r;
            grad.extend(rep.grad_log_sigma2);
            if learn {
                grad.push(rep.grad_log_delta.unwrap_or(0.0));
            }
            Ok((rep.value, grad))
        }
    };

    let mut z = config.initial_signal(instance);
    z.extend(std::iter::repeat_n(0.0, n));
    let start = config.learned_delta_start(instance);
    let target = if learn {
        z.push(start.ln());
        start
    } else {
        config.fixed_delta(instance)
    };
    let mut stages = Vec::new();
    if !learn {
        let mut d = start;
        while d > 10.0 * target {
            stages.push(d);
            d /= 10.0;
        }
    }

    let budget = 5 * config.max_iter;
    let per_stage = if stages.is_empty() {
        0
    } else {
        (budget / (2 * stages.len())).max(1)
    };
    let mut used = 0;
    let mut iterations = 0;
    for &delta in &stages {
        let cfg = LbfgsConfig {
            max_evals: per_stage,
            ..LbfgsConfig::default()
        };
        let res = lbfgs(objective(delta), z, &cfg)?;
        used += res.evaluations;
        iterations += res.iterations;
        z = res.x;
    }
    let cfg = LbfgsConfig {
        max_evals: budget.saturating_sub(used).max(1),
        ..LbfgsConfig::default()
    };
    let res = lbfgs(objective(target), z, &cfg)?;
    let params = unpack(&res.x, target);
    let moments = crate::free_energy::moments_of(instance.prior(), &params);
    let delta_trace = if learn { vec![params.delta] } else { Vec::new() };
    let mut rep = SolveReport::new(config.algo, instance, moments, params)?;
    rep.iterations = iterations + res.iterations;
    rep.converged = res.converged;
    rep.energy_trace = res.trace;
    rep.delta_trace = delta_trace;
    Ok(rep)
}
